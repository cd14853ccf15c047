"""Causal pre-LN transformer over continuous embeddings."""
import math

import torch
import torch.nn.functional as F
from torch import nn

from config.settings import BackboneConfig
from core.errors import ContextOverflowError, DimensionMismatchError
from .kv_cache import KVCache

INIT_STD = 0.02


def init_linear(layer: nn.Linear):
    nn.init.trunc_normal_(layer.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, layer_idx: int, cache: KVCache | None = None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.num_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))
        past = 0
        if cache is not None:
            past = cache.current_length
            k, v = cache.update(layer_idx, k, v)
        total = k.shape[-2]

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # query i sits at absolute position past + i and may see keys <= that
        query_pos = torch.arange(past, past + n, device=x.device).unsqueeze(1)
        key_pos = torch.arange(total, device=x.device).unsqueeze(0)
        scores = scores.masked_fill(key_pos > query_pos, float("-inf"))
        out = F.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_mult * dim),
            nn.GELU(),
            nn.Linear(mlp_mult * dim, dim),
        )

    def forward(self, x, layer_idx: int, cache: KVCache | None = None):
        x = x + self.attn(self.ln1(x), layer_idx, cache)
        return x + self.mlp(self.ln2(x))


class CausalBackbone(nn.Module):
    """Maps an embedding prefix to one hidden vector per input position.

    Output i summarizes inputs 0..i and conditions the prediction of the
    embedding at position i + 1. Positions are absolute and learned; with a
    cache they continue from `cache.current_length`.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.model_dim)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_context, config.model_dim))
        self.blocks = nn.ModuleList(
            Block(config.model_dim, config.num_heads, config.mlp_mult) for _ in range(config.num_layers)
        )
        self.ln_out = nn.LayerNorm(config.model_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                init_linear(module)
        nn.init.trunc_normal_(self.pos_emb, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    def forward(self, inputs: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        if inputs.shape[-1] != self.config.input_dim:
            raise DimensionMismatchError("backbone input", self.config.input_dim, inputs.shape[-1])
        n = inputs.shape[1]
        start = 0
        if cache is not None:
            cache.check_compatible(self)
            cache.reserve(n)
            start = cache.current_length
        elif n > self.config.max_context:
            raise ContextOverflowError(n, self.config.max_context)

        h = self.input_proj(inputs) + self.pos_emb[start:start + n]
        for i, block in enumerate(self.blocks):
            h = block(h, i, cache)
        if cache is not None:
            cache.advance(n)
        return self.ln_out(h)
