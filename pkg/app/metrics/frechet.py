"""Gaussian summary statistics, the Frechet distance between them, and the
window feature map the distribution metrics are computed on."""
import logging
import math
from dataclasses import dataclass

import torch

from core.errors import DimensionMismatchError, InsufficientSamplesError, NumericalError
from core.rng import RngStream

logger = logging.getLogger(__name__)

SHRINKAGE = 1e-6
# relative eigenvalue below which a covariance counts as singular
SINGULAR_RATIO = 1e-12


@dataclass
class GaussianStats:
    mean: torch.Tensor
    covariance: torch.Tensor
    count: int

    @property
    def num_features(self) -> int:
        return int(self.mean.shape[-1])

    @classmethod
    def from_features(cls, features: torch.Tensor) -> "GaussianStats":
        features = torch.as_tensor(features, dtype=torch.float64)
        count, num_features = features.shape
        if count <= num_features:
            raise InsufficientSamplesError(count, num_features)
        mean = features.mean(dim=0)
        centered = features - mean
        cov = centered.T @ centered / (count - 1)
        return cls(mean, 0.5 * (cov + cov.T), count)


def _psd_sqrt(matrix: torch.Tensor) -> torch.Tensor:
    eigvals, eigvecs = torch.linalg.eigh(matrix)
    return (eigvecs * eigvals.clamp_min(0).sqrt()) @ eigvecs.T


def _near_singular(cov: torch.Tensor) -> bool:
    eigvals = torch.linalg.eigvalsh(cov)
    top = eigvals.max().item()
    return top <= 0 or eigvals.min().item() < SINGULAR_RATIO * top


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken from the symmetric form
    S_a^(1/2) S_b S_a^(1/2), whose eigenvalues equal those of S_a S_b.
    """
    if a.num_features != b.num_features:
        raise DimensionMismatchError("frechet_distance", a.num_features, b.num_features)
    cov_a = a.covariance.double()
    cov_b = b.covariance.double()
    if _near_singular(cov_a) or _near_singular(cov_b):
        eye = torch.eye(a.num_features, dtype=torch.float64)
        cov_a = cov_a + SHRINKAGE * eye
        cov_b = cov_b + SHRINKAGE * eye
    root_a = _psd_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    trace_root = torch.linalg.eigvalsh(0.5 * (product + product.T)).clamp_min(0).sqrt().sum()
    diff = a.mean.double() - b.mean.double()
    value = (diff @ diff + torch.trace(cov_a) + torch.trace(cov_b) - 2 * trace_root).item()
    if not math.isfinite(value):
        raise NumericalError("non-finite Frechet distance")
    return max(value, 0.0)


def projection_matrix(window: int, dim: int, feature_seed: int) -> torch.Tensor:
    rng = RngStream(feature_seed).split("window_projection", window, dim)
    return rng.normal((window * dim, 2 * dim), dtype=torch.float64) / math.sqrt(window * dim)


def window_features(windows: torch.Tensor, feature_seed: int) -> torch.Tensor:
    """Per-window features (N, 5d): mean, std, lag-1 autocorrelation per
    dimension, and a seeded 2d-dim random projection of the flattened window."""
    windows = torch.as_tensor(windows, dtype=torch.float64)
    if windows.dim() != 3 or windows.shape[1] < 2:
        raise ValueError(f"windows must be (N, length >= 2, dim), got {tuple(windows.shape)}")
    n, length, dim = windows.shape
    mean = windows.mean(dim=1)
    centered = windows - mean.unsqueeze(1)
    std = centered.pow(2).mean(dim=1).sqrt()
    lag = (centered[:, 1:] * centered[:, :-1]).sum(dim=1)
    energy = centered.pow(2).sum(dim=1)
    autocorr = torch.where(energy > 0, lag / energy.clamp_min(torch.finfo(torch.float64).tiny), torch.zeros_like(lag))
    projected = windows.reshape(n, length * dim) @ projection_matrix(length, dim, feature_seed)
    return torch.cat((mean, std, autocorr, projected), dim=1)
