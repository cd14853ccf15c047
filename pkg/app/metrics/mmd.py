import logging
import math

import torch

from core.rng import RngStream

logger = logging.getLogger(__name__)

MEDIAN_SUBSAMPLE = 1000


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist").pow(2)


def median_bandwidth(samples_a: torch.Tensor, samples_b: torch.Tensor, seed: int = 0) -> float:
    """h with 2h^2 equal to the median pairwise squared distance of the pooled samples."""
    pooled = torch.cat((samples_a, samples_b)).double()
    if len(pooled) > MEDIAN_SUBSAMPLE:
        rng = RngStream(seed).split("median_bandwidth")
        pooled = pooled[torch.randperm(len(pooled), generator=rng.generator)[:MEDIAN_SUBSAMPLE]]
    d2 = _sq_dists(pooled, pooled)
    off_diagonal = d2[~torch.eye(len(pooled), dtype=torch.bool)]
    median = off_diagonal.median().item()
    return math.sqrt(max(median, 1e-12) / 2)


def mmd_rbf(samples_a, samples_b, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)).

    `bandwidth=None` picks h by the median heuristic.
    """
    a = torch.as_tensor(samples_a, dtype=torch.float64)
    b = torch.as_tensor(samples_b, dtype=torch.float64)
    if a.dim() == 1:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd_rbf needs at least two samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    gamma = 1.0 / (2 * bandwidth ** 2)
    n, m = len(a), len(b)
    k_aa = torch.exp(-gamma * _sq_dists(a, a))
    k_bb = torch.exp(-gamma * _sq_dists(b, b))
    k_ab = torch.exp(-gamma * _sq_dists(a, b))
    term_a = (k_aa.sum() - k_aa.diagonal().sum()) / (n * (n - 1))
    term_b = (k_bb.sum() - k_bb.diagonal().sum()) / (m * (m - 1))
    return (term_a + term_b - 2 * k_ab.mean()).item()
