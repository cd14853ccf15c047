"""Per-layer key/value cache for incremental causal decoding."""
import torch

from core.errors import ConfigError, ContextOverflowError


class KVCache:
    """Keys and values per layer, each shaped (batch, heads, length, head_dim).

    A cache belongs to one generation session; it is never shared between
    threads.
    """

    def __init__(self, num_layers: int, num_heads: int, max_context: int):
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.max_context = max_context
        self.keys: list[torch.Tensor | None] = [None] * num_layers
        self.values: list[torch.Tensor | None] = [None] * num_layers
        self.current_length = 0

    @classmethod
    def for_backbone(cls, backbone) -> "KVCache":
        cfg = backbone.config
        return cls(cfg.num_layers, cfg.num_heads, cfg.max_context)

    def check_compatible(self, backbone):
        cfg = backbone.config
        if (self.num_layers, self.num_heads, self.max_context) != (cfg.num_layers, cfg.num_heads, cfg.max_context):
            raise ConfigError(
                f"cache built for {self.num_layers} layers / {self.num_heads} heads / context {self.max_context}, "
                f"backbone has {cfg.num_layers} / {cfg.num_heads} / {cfg.max_context}",
                "kv_cache",
            )

    def reserve(self, new_tokens: int):
        if self.current_length + new_tokens > self.max_context:
            raise ContextOverflowError(self.current_length + new_tokens, self.max_context)

    def update(self, layer_idx: int, key: torch.Tensor, value: torch.Tensor):
        if self.keys[layer_idx] is None:
            self.keys[layer_idx] = key
            self.values[layer_idx] = value
        else:
            self.keys[layer_idx] = torch.cat((self.keys[layer_idx], key), dim=-2)
            self.values[layer_idx] = torch.cat((self.values[layer_idx], value), dim=-2)
        return self.keys[layer_idx], self.values[layer_idx]

    def advance(self, new_tokens: int):
        self.current_length += new_tokens
