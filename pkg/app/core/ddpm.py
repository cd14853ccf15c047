"""Linear-schedule noise prediction, used by the MAR baseline.

Corruption follows the usual sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps form and
sampling walks a deterministic DDIM stride, so both diffusion samplers in the
repo are deterministic given their initial noise.
"""
from typing import Callable

import torch

from .errors import DimensionMismatchError, IntegrationError

DEFAULT_TRAIN_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02


class LinearSchedule:
    def __init__(self, total_steps: int = DEFAULT_TRAIN_STEPS, beta_start: float = BETA_START, beta_end: float = BETA_END):
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        self.total_steps = total_steps
        self.betas = torch.linspace(beta_start, beta_end, total_steps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)

    def check_index(self, step_index):
        lo = int(torch.as_tensor(step_index).min())
        hi = int(torch.as_tensor(step_index).max())
        if lo < 0 or hi >= self.total_steps:
            raise IndexError(f"step index must be in [0, {self.total_steps}), got {lo if lo < 0 else hi}")

    def alpha_bar(self, step_index, like: torch.Tensor) -> torch.Tensor:
        ab = self.alphas_cumprod[torch.as_tensor(step_index, dtype=torch.long)]
        ab = ab.to(dtype=like.dtype, device=like.device)
        if ab.dim() > 0 and ab.dim() == like.dim() - 1:
            ab = ab.unsqueeze(-1)
        return ab

    def signal_to_noise(self, step_index) -> torch.Tensor:
        ab = self.alphas_cumprod[torch.as_tensor(step_index, dtype=torch.long)]
        return ab / (1.0 - ab)

    def ddim_timesteps(self, steps: int) -> list[int]:
        return torch.linspace(self.total_steps - 1, 0, steps, dtype=torch.float64).round().long().tolist()


_default_schedules: dict[int, LinearSchedule] = {}


def get_schedule(total_steps: int = DEFAULT_TRAIN_STEPS) -> LinearSchedule:
    if total_steps not in _default_schedules:
        _default_schedules[total_steps] = LinearSchedule(total_steps)
    return _default_schedules[total_steps]


def ddpm_linear_corrupt(x: torch.Tensor, eps: torch.Tensor, step_index, total_steps: int = DEFAULT_TRAIN_STEPS) -> torch.Tensor:
    if x.shape[-1] != eps.shape[-1]:
        raise DimensionMismatchError("ddpm_linear_corrupt", x.shape[-1], eps.shape[-1])
    schedule = get_schedule(total_steps)
    schedule.check_index(step_index)
    ab = schedule.alpha_bar(step_index, x)
    return ab.sqrt() * x + (1 - ab).sqrt() * eps


def ddpm_sample(
    eps_pred_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    y_init: torch.Tensor,
    steps: int,
    total_steps: int = DEFAULT_TRAIN_STEPS,
) -> torch.Tensor:
    """Deterministic DDIM reverse pass from the last training step down to 0.

    `eps_pred_fn(y, t)` gets the integer timestep as a long tensor over the
    leading axes of y.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    schedule = get_schedule(total_steps)
    timesteps = schedule.ddim_timesteps(steps)
    y = y_init
    x0 = y_init
    for i, t in enumerate(timesteps):
        t_batch = torch.full(y.shape[:-1], t, dtype=torch.long, device=y.device)
        eps = eps_pred_fn(y, t_batch)
        if not torch.isfinite(eps).all():
            raise IntegrationError(i, steps)
        ab_t = schedule.alpha_bar(t, y)
        x0 = (y - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
        if i + 1 < len(timesteps):
            ab_next = schedule.alpha_bar(timesteps[i + 1], y)
            y = ab_next.sqrt() * x0 + (1 - ab_next).sqrt() * eps
    return x0
