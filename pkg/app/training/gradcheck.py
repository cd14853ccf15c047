import logging
from typing import Callable

import torch

from core.rng import RngStream

logger = logging.getLogger(__name__)


def finite_difference_gradcheck(
    params: list[torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    num_probes: int,
    rng: RngStream | None = None,
    step_size: float = 1e-6,
    scale_floor: float = 1e-6,
) -> float:
    """Largest relative error between autograd and central differences over
    `num_probes` randomly chosen scalar parameters.

    `loss_fn` must be deterministic; run it in float64 for tight tolerances.
    """
    params = [p for p in params if p.requires_grad]
    total = sum(p.numel() for p in params)
    if num_probes <= 0 or total == 0:
        return 0.0
    rng = rng or RngStream(0).split("gradcheck")

    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    offsets = torch.tensor([0] + [p.numel() for p in params]).cumsum(0)
    probes = rng.integers(0, total, (num_probes,)).tolist()

    worst = 0.0
    with torch.no_grad():
        for flat in probes:
            which = int(torch.searchsorted(offsets, torch.tensor(flat), right=True)) - 1
            index = flat - int(offsets[which])
            view = params[which].data.view(-1)
            original = view[index].item()
            view[index] = original + step_size
            plus = loss_fn().item()
            view[index] = original - step_size
            minus = loss_fn().item()
            view[index] = original
            numeric = (plus - minus) / (2 * step_size)
            exact = analytic[which].reshape(-1)[index].item()
            err = abs(numeric - exact) / max(abs(numeric), abs(exact), scale_floor)
            worst = max(worst, err)
    logger.debug("gradcheck over %d probes: max relative error %.3e", num_probes, worst)
    return worst
