from abc import ABC, abstractmethod
from dataclasses import dataclass

import torch

from config.settings import TrainConfig
from core.flow_math import noise_augment, sample_error_level
from core.rng import RngStream


@dataclass
class LossOutput:
    loss: torch.Tensor
    # per batch element mean loss, used to locate a non-finite element
    per_sequence: torch.Tensor


class TrainingObjective(ABC):
    def __init__(self, name: str, noise_augmentation: bool):
        self.name = name
        self.noise_augmentation = noise_augmentation

    @abstractmethod
    def compute_loss(self, model, batch: torch.Tensor, rng: RngStream, cfg: TrainConfig) -> LossOutput:
        pass

    def backbone_inputs(self, batch: torch.Tensor, rng: RngStream, cfg: TrainConfig) -> torch.Tensor:
        """Sequence the Backbone sees: the batch itself, or its noise-augmented copy.

        The error levels k_t only shape the values; they are never handed to
        the Backbone.
        """
        if not self.noise_augmentation:
            return batch
        stream = rng.split("augment")
        k = sample_error_level(stream.split("k"), batch.shape[:-1], cfg.max_error_level, dtype=batch.dtype)
        eps = stream.split("eps").normal(batch.shape, dtype=batch.dtype, device=batch.device)
        return noise_augment(batch, eps, k.to(batch.device))

    def conditioning(self, model, batch: torch.Tensor, rng: RngStream, cfg: TrainConfig, inputs=None) -> torch.Tensor:
        """z for every position of the batch, with per-position z-dropout to z_SOS."""
        if inputs is None:
            inputs = self.backbone_inputs(batch, rng, cfg)
        z = model.backbone_forward(inputs[:, :-1])
        if cfg.z_dropout_prob > 0:
            drop = rng.split("z_dropout").uniform(z.shape[:-1]).to(z.device) < cfg.z_dropout_prob
            z = torch.where(drop.unsqueeze(-1), model.z_sos.to(z.dtype), z)
        return z
