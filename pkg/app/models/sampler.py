"""Shallow denoising MLP conditioned on z through its input and on the noise
level through adaptive layer norm."""
import math

import torch
import torch.nn.functional as F
from torch import nn

from config.settings import SamplerConfig
from core.errors import DimensionMismatchError
from .backbone import init_linear

FREQ_DIM = 64
SIGMA_SCALE = 1000.0


def sinusoidal_embedding(sigma: torch.Tensor, dim: int = FREQ_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=sigma.dtype, device=sigma.device) / half)
    args = (sigma * SIGMA_SCALE).unsqueeze(-1) * freqs
    return torch.cat((torch.cos(args), torch.sin(args)), dim=-1)


class SigmaEmbedding(nn.Module):
    def __init__(self, cond_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(FREQ_DIM, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))

    def forward(self, sigma):
        return self.mlp(sinusoidal_embedding(sigma))


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class AdaLNBlock(nn.Module):
    def __init__(self, dim: int, mlp_mult: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_mult * dim), nn.SiLU(), nn.Linear(mlp_mult * dim, dim))
        self.modulation = nn.Linear(cond_dim, 3 * dim)

    def forward(self, x, c):
        shift, scale, gate = self.modulation(F.silu(c)).chunk(3, dim=-1)
        return x + gate * self.mlp(modulate(self.norm(x), shift, scale))


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(cond_dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x, c):
        shift, scale = self.modulation(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Sampler(nn.Module):
    """Predicts a drift (or noise) vector from concat(z, y) and a noise level."""

    def __init__(self, config: SamplerConfig, cond_dim: int):
        super().__init__()
        self.config = config
        self.cond_dim = cond_dim
        sigma_dim = max(config.model_dim // 4, 8)
        self.input_proj = nn.Linear(cond_dim + config.input_dim, config.model_dim)
        self.sigma_emb = SigmaEmbedding(sigma_dim)
        self.blocks = nn.ModuleList(AdaLNBlock(config.model_dim, config.mlp_mult, sigma_dim) for _ in range(config.num_layers))
        self.final = FinalLayer(config.model_dim, config.input_dim, sigma_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                init_linear(module)
        # modulation starts at identity: shift=scale=gate=0
        for block in self.blocks:
            nn.init.zeros_(block.modulation.weight)
            nn.init.zeros_(block.modulation.bias)
        nn.init.zeros_(self.final.modulation.weight)
        nn.init.zeros_(self.final.modulation.bias)

    def forward(self, y: torch.Tensor, sigma: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.config.input_dim:
            raise DimensionMismatchError("sampler y", self.config.input_dim, y.shape[-1])
        if z.shape[-1] != self.cond_dim:
            raise DimensionMismatchError("sampler z", self.cond_dim, z.shape[-1])
        sigma = torch.as_tensor(sigma, dtype=y.dtype, device=y.device).expand(y.shape[:-1])
        c = self.sigma_emb(sigma)
        h = self.input_proj(torch.cat((z.expand(*y.shape[:-1], -1), y), dim=-1))
        for block in self.blocks:
            h = block(h, c)
        return self.final(h, c)
