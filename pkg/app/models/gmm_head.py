"""Diagonal Gaussian-mixture output head."""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from config.settings import GMMHeadConfig
from core.errors import DimensionMismatchError, NumericalError
from core.rng import RngStream
from .backbone import init_linear

STD_FLOOR = 1e-4
LOG_2PI = math.log(2 * math.pi)


@dataclass
class GMMParams:
    """Mixture over the last axis: weights (..., K), means/stddevs (..., K, d)."""
    weights: torch.Tensor
    means: torch.Tensor
    stddevs: torch.Tensor

    @property
    def num_modes(self) -> int:
        return self.weights.shape[-1]

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log(self.weights.clamp_min(torch.finfo(self.weights.dtype).tiny))


class GMMHead(nn.Module):
    def __init__(self, config: GMMHeadConfig):
        super().__init__()
        self.config = config
        k, d = config.num_modes, config.output_dim
        self.proj = nn.Linear(config.input_dim, k + 2 * k * d)
        init_linear(self.proj)

    def forward(self, z: torch.Tensor) -> GMMParams:
        if z.shape[-1] != self.config.input_dim:
            raise DimensionMismatchError("gmm head z", self.config.input_dim, z.shape[-1])
        k, d = self.config.num_modes, self.config.output_dim
        out = self.proj(z)
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite activations in GMM head")
        logits, means, raw_std = out.split((k, k * d, k * d), dim=-1)
        lead = z.shape[:-1]
        return GMMParams(
            weights=F.softmax(logits, dim=-1),
            means=means.reshape(*lead, k, d),
            stddevs=(F.softplus(raw_std) + STD_FLOOR).reshape(*lead, k, d),
        )


def gmm_log_prob(gmm: GMMParams, x: torch.Tensor) -> torch.Tensor:
    """Log mixture density of x (..., d), log-sum-exp over modes."""
    if x.shape[-1] != gmm.means.shape[-1]:
        raise DimensionMismatchError("gmm_log_prob", gmm.means.shape[-1], x.shape[-1])
    diff = (x.unsqueeze(-2) - gmm.means) / gmm.stddevs
    component = -0.5 * (diff.pow(2) + LOG_2PI).sum(-1) - torch.log(gmm.stddevs).sum(-1)
    return torch.logsumexp(gmm.log_weights + component, dim=-1)


def gmm_sample(gmm: GMMParams, temperature: float, rng: RngStream, variance_scaling: str = "std") -> torch.Tensor:
    """Pick a mode by weight, then draw from it with a tempered spread.

    "std" multiplies each stddev by the temperature, "variance" multiplies the
    variance by it.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    lead = gmm.weights.shape[:-1]
    d = gmm.means.shape[-1]
    flat_w = gmm.weights.reshape(-1, gmm.num_modes).double()
    modes = torch.multinomial(flat_w, 1, generator=rng.generator).reshape(*lead, 1, 1)
    mean = torch.gather(gmm.means, -2, modes.expand(*lead, 1, d)).squeeze(-2)
    std = torch.gather(gmm.stddevs, -2, modes.expand(*lead, 1, d)).squeeze(-2)
    scale = temperature if variance_scaling == "std" else math.sqrt(temperature)
    noise = rng.normal(mean.shape, dtype=mean.dtype, device=mean.device)
    return mean + scale * std * noise
