"""Parameter container tying Backbone, head and the learnable SOS vector together."""
import copy
import dataclasses
import math

import torch
from torch import nn

from config.settings import GMM_OBJECTIVES, ModelConfig, architecture_hash
from core.errors import NumericalError
from .backbone import INIT_STD, CausalBackbone
from .gmm_head import GMMHead, GMMParams
from .kv_cache import KVCache
from .sampler import Sampler


def effective_backbone_config(model_config: ModelConfig, objective: str):
    cfg = copy.deepcopy(model_config.backbone)
    if objective in GMM_OBJECTIVES:
        cfg.num_layers = math.ceil(cfg.num_layers * model_config.gmm_depth_ratio)
    return cfg


class ContinuousAutoregressiveModel(nn.Module):
    """All learnable state of one model variant.

    `backbone_forward` follows the shift-by-one convention: for inputs x_0..x_{n-1}
    it returns z_0..z_n where z_0 is z_SOS and z_{t+1} is the Backbone output
    at position t.
    """

    def __init__(self, config: ModelConfig, objective: str = "cam"):
        super().__init__()
        self.config = config
        self.objective = objective
        self.backbone = CausalBackbone(effective_backbone_config(config, objective))
        if objective in GMM_OBJECTIVES:
            self.head_kind = "gmm"
            self.gmm_head = GMMHead(config.gmm)
        else:
            self.head_kind = "sampler"
            self.sampler = Sampler(config.sampler, cond_dim=config.backbone.model_dim)
        self.z_sos = nn.Parameter(torch.empty(config.backbone.model_dim))
        nn.init.trunc_normal_(self.z_sos, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        self.metadata = {
            "config_hash": architecture_hash(config, objective),
            "objective": objective,
            "train_step": 0,
        }

    @property
    def embedding_dim(self) -> int:
        return self.config.backbone.input_dim

    def new_cache(self) -> KVCache:
        return KVCache.for_backbone(self.backbone)

    def backbone_forward(self, inputs: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        """inputs: (batch, n, d). Without a cache returns (batch, n + 1, D)
        including z_SOS; with a cache returns only the n new outputs."""
        h = self.backbone(inputs, cache)
        if cache is not None:
            return h
        sos = self.z_sos.expand(inputs.shape[0], 1, -1).to(h.dtype)
        return torch.cat((sos, h), dim=1)

    def sampler_forward(self, y: torch.Tensor, sigma, z: torch.Tensor) -> torch.Tensor:
        if self.head_kind != "sampler":
            raise NumericalError(f"{self.objective} model has no Sampler")
        return self.sampler(y, sigma, z)

    def gmm_head_forward(self, z: torch.Tensor) -> GMMParams:
        if self.head_kind != "gmm":
            raise NumericalError(f"{self.objective} model has no GMM head")
        return self.gmm_head(z)

    def parameters_finite(self) -> bool:
        return all(torch.isfinite(p).all() for p in self.parameters())


def build_model(config: ModelConfig, objective: str = "cam", device="cpu", dtype=torch.float32) -> ContinuousAutoregressiveModel:
    return ContinuousAutoregressiveModel(config, objective).to(device=device, dtype=dtype)


def count_parameters(config: ModelConfig, objective: str = "cam") -> int:
    """Parameter total computed from shapes alone on the meta device."""
    with torch.device("meta"):
        model = ContinuousAutoregressiveModel(dataclasses.replace(config), objective)
    return sum(p.numel() for p in model.parameters())
