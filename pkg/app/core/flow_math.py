"""Closed-form rectified-flow mathematics.

Embeddings are tensors whose last axis is the embedding dimension d; leading
axes are batch/time. Noise levels (sigma) and error levels (k) are either
python floats or tensors broadcastable against the leading axes.

Sign convention: the drift target is data minus noise, and integration runs
sigma from 1 (noise) to 0 (data) with y <- y + v * dsigma.
"""
import logging
from typing import Callable

import torch

from .errors import DimensionMismatchError, IntegrationError
from .rng import RngStream

logger = logging.getLogger(__name__)

SIGMA_DISTRIBUTIONS = ("logit_normal", "lognormal_clamped")
INJECTION_MODES = ("convex", "additive")
LOGNORMAL_CLAMP = 1e-5


def _check_same_shape(name, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatchError(name, a.shape[-1], b.shape[-1])


def _level(level, like):
    if isinstance(level, torch.Tensor):
        level = level.to(dtype=like.dtype, device=like.device)
        if level.dim() == like.dim() - 1:
            level = level.unsqueeze(-1)
    return level


def noise_augment(x: torch.Tensor, eps: torch.Tensor, k) -> torch.Tensor:
    """Mix an embedding with noise at error level k: k * eps + (1 - k) * x."""
    _check_same_shape("noise_augment", x, eps)
    k = _level(k, x)
    return k * eps + (1 - k) * x


def rf_corrupt(x: torch.Tensor, eps: torch.Tensor, sigma) -> torch.Tensor:
    """Point on the straight path from data (sigma=0) to noise (sigma=1)."""
    _check_same_shape("rf_corrupt", x, eps)
    sigma = _level(sigma, x)
    return sigma * eps + (1 - sigma) * x


def rf_target_drift(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_same_shape("rf_target_drift", x, eps)
    return x - eps


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise DimensionMismatchError("mse_loss", tuple(target.shape), tuple(pred.shape))
    return (pred - target).pow(2).mean()


def inject_inference_noise(x: torch.Tensor, eps: torch.Tensor, k: float, mode: str = "convex") -> torch.Tensor:
    if mode == "convex":
        return noise_augment(x, eps, k)
    if mode == "additive":
        _check_same_shape("inject_inference_noise", x, eps)
        return x + k * eps
    raise ValueError(f"unknown injection mode {mode!r}")


def sigma_from_normal(n: torch.Tensor, distribution: str = "logit_normal") -> torch.Tensor:
    if distribution == "logit_normal":
        return torch.sigmoid(n)
    if distribution == "lognormal_clamped":
        return torch.exp(n).clamp(LOGNORMAL_CLAMP, 1 - LOGNORMAL_CLAMP)
    raise ValueError(f"unknown sigma distribution {distribution!r}")


def sample_sigma(rng: RngStream, shape=(), distribution: str = "logit_normal", dtype=torch.float32) -> torch.Tensor:
    # float64 draw keeps sigmoid away from exactly 0 or 1 before the cast
    n = rng.normal(shape, dtype=torch.float64)
    sigma = sigma_from_normal(n, distribution)
    return sigma.clamp(torch.finfo(dtype).tiny, 1 - torch.finfo(dtype).eps).to(dtype)


def sample_error_level(rng: RngStream, shape=(), max_level: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    return rng.uniform(shape, dtype=dtype) * max_level


def integrate_rf_ode(
    drift_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    y_init: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Euler integration of the learned flow from sigma=1 down to sigma=0.

    `drift_fn(y, sigma)` receives sigma as a tensor over the leading axes of y.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    y = y_init
    dt = 1.0 / steps
    for i in range(steps):
        sigma = torch.full(y.shape[:-1], 1.0 - i * dt, dtype=y.dtype, device=y.device)
        v = drift_fn(y, sigma)
        if not torch.isfinite(v).all():
            raise IntegrationError(i, steps)
        y = y + v * dt
    return y
