"""Objectives whose head is the Sampler MLP.

CAM, MAR-RF and MAR (linear schedule) share one code path; they differ only in
how the target embedding is corrupted and what the Sampler must predict.
"""
from abc import abstractmethod

import torch

from config.settings import TrainConfig
from core.ddpm import ddpm_linear_corrupt
from core.flow_math import noise_augment, rf_corrupt, rf_target_drift, sample_error_level, sample_sigma
from core.rng import RngStream
from .objective_base import LossOutput, TrainingObjective


class SamplerObjective(TrainingObjective):
    @abstractmethod
    def corrupt(self, x: torch.Tensor, eps: torch.Tensor, rng: RngStream, cfg: TrainConfig):
        """Return (y, level, target): corrupted embedding, the scalar level fed to
        the Sampler's adaptive norm, and the regression target."""
        pass

    def sampler_target_source(self, batch, rng: RngStream, cfg: TrainConfig):
        if not cfg.augment_sampler_target:
            return batch
        stream = rng.split("target_augment")
        k = sample_error_level(stream.split("k"), batch.shape[:-1], cfg.max_error_level, dtype=batch.dtype)
        eps = stream.split("eps").normal(batch.shape, dtype=batch.dtype, device=batch.device)
        return noise_augment(batch, eps, k.to(batch.device))

    def compute_loss(self, model, batch, rng, cfg):
        z = self.conditioning(model, batch, rng, cfg)
        x = self.sampler_target_source(batch, rng, cfg)
        eps = rng.split("target_noise").normal(x.shape, dtype=x.dtype, device=x.device)
        y, level, target = self.corrupt(x, eps, rng, cfg)
        pred = model.sampler_forward(y, level, z)
        sq = (pred - target).pow(2)
        return LossOutput(loss=sq.mean(), per_sequence=sq.detach().mean(dim=(1, 2)))


class RectifiedFlowObjective(SamplerObjective):
    """Drift regression on straight noise-data paths (CAM when augmented, MAR-RF otherwise)."""

    def corrupt(self, x, eps, rng, cfg):
        sigma = sample_sigma(rng.split("sigma"), x.shape[:-1], cfg.sigma_distribution, dtype=x.dtype).to(x.device)
        return rf_corrupt(x, eps, sigma), sigma, rf_target_drift(x, eps)


class NoisePredictionObjective(SamplerObjective):
    """epsilon prediction under the linear beta schedule (MAR)."""

    def corrupt(self, x, eps, rng, cfg):
        t = rng.split("timestep").integers(0, cfg.ddpm_train_steps, x.shape[:-1]).to(x.device)
        y = ddpm_linear_corrupt(x, eps, t, cfg.ddpm_train_steps)
        return y, t.to(x.dtype) / cfg.ddpm_train_steps, eps
