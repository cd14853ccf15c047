"""How closely a model's next-step distribution matches the exact conditional
of a synthetic process.

Anything with `sample_next(prefix, num_draws, rng)` can be scored, which lets
the oracle itself be replayed to measure the Monte-Carlo floor.
"""
import logging
from dataclasses import dataclass
from typing import Protocol

import pandas as pd
import torch

from core.ddpm import DEFAULT_TRAIN_STEPS, ddpm_sample
from core.flow_math import integrate_rf_ode
from core.rng import RngStream
from data.synthetic import SyntheticProcessSpec, oracle_conditional, oracle_mixture, sample_process
from models.cam_model import ContinuousAutoregressiveModel
from models.gmm_head import GMMParams, gmm_sample

logger = logging.getLogger(__name__)


class NextStepSampler(Protocol):
    def sample_next(self, prefix: torch.Tensor, num_draws: int, rng: RngStream) -> torch.Tensor:
        ...


class ModelSampler:
    """Draws from a trained model given a clean prefix."""

    def __init__(self, model: ContinuousAutoregressiveModel, num_steps: int = 50, temperature: float = 1.0,
                 normalization: dict | None = None):
        self.model = model
        self.num_steps = num_steps
        self.temperature = temperature
        self.normalization = normalization

    @torch.no_grad()
    def sample_next(self, prefix, num_draws, rng):
        model = self.model
        param = next(model.parameters())
        prefix = torch.as_tensor(prefix, dtype=torch.float64)
        if self.normalization:
            prefix = (prefix - self.normalization["mean"]) / self.normalization["std"]
        window = model.backbone.config.max_context
        prefix = prefix[-window:].to(device=param.device, dtype=param.dtype)
        model.eval()
        z = model.backbone_forward(prefix.unsqueeze(0))[:, -1].expand(num_draws, -1)

        if model.head_kind == "gmm":
            gmm = model.gmm_head_forward(z)
            draws = gmm_sample(gmm, self.temperature, rng.split("mode"))
        else:
            y_init = rng.split("init").normal((num_draws, model.embedding_dim), dtype=param.dtype, device=param.device)
            if model.objective == "mar_linear":
                total = model.metadata.get("ddpm_train_steps", DEFAULT_TRAIN_STEPS)
                draws = ddpm_sample(lambda y, t: model.sampler_forward(y, t.to(y.dtype) / total, z), y_init, self.num_steps, total)
            else:
                draws = integrate_rf_ode(lambda y, sigma: model.sampler_forward(y, sigma, z), y_init, self.num_steps)
        draws = draws.double().cpu()
        if self.normalization:
            draws = draws * self.normalization["std"] + self.normalization["mean"]
        return draws


class OracleSampler:
    """Exact draws from the process's own next-step conditional."""

    def __init__(self, spec: SyntheticProcessSpec):
        self.spec = spec

    def sample_next(self, prefix, num_draws, rng):
        weights, means, covs = oracle_mixture(self.spec, prefix)
        modes = torch.multinomial(weights, num_draws, replacement=True, generator=rng.split("mode").generator)
        noise = rng.split("noise").normal((num_draws, self.spec.dim), dtype=torch.float64)
        chol = torch.linalg.cholesky(covs)
        return means[modes] + (chol[modes] @ noise.unsqueeze(-1)).squeeze(-1)


@dataclass
class ConditionalAccuracy:
    mean_err: float
    cov_err: float
    probes: pd.DataFrame
    mean_rel_err: float = float("nan")


def moment_errors(draws: torch.Tensor, mean: torch.Tensor, cov: torch.Tensor) -> tuple[float, float]:
    """Mean error relative to the conditional's RMS size, covariance error in
    relative Frobenius norm."""
    draws = draws.double()
    emp_mean = draws.mean(dim=0)
    emp_cov = torch.cov(draws.T).reshape(cov.shape)
    mean_err = (emp_mean - mean).norm() / torch.sqrt(mean.pow(2).sum() + torch.trace(cov))
    cov_err = torch.linalg.matrix_norm(emp_cov - cov) / torch.linalg.matrix_norm(cov)
    return mean_err.item(), cov_err.item()


def relative_mean_error(draws: torch.Tensor, mean: torch.Tensor) -> float:
    """||mean_hat - mean|| / ||mean||; NaN when the conditional mean is zero."""
    norm = mean.double().norm().item()
    if norm < 1e-12:
        return float("nan")
    return ((draws.double().mean(dim=0) - mean.double()).norm() / norm).item()


def conditional_accuracy(sampler, spec: SyntheticProcessSpec, num_probes: int, rng: RngStream,
                         prefix_length: int = 16, num_draws: int = 10_000, num_steps: int = 50) -> ConditionalAccuracy:
    """Average moment errors over `num_probes` prefixes drawn from the process."""
    if isinstance(sampler, ContinuousAutoregressiveModel):
        sampler = ModelSampler(sampler, num_steps=num_steps)
    prefixes = sample_process(spec, num_probes, prefix_length, rng.split("prefixes"))
    rows = []
    for i, prefix in enumerate(prefixes.sequences):
        mean, cov = oracle_conditional(spec, prefix)
        draws = sampler.sample_next(prefix, num_draws, rng.split("probe", i))
        mean_err, cov_err = moment_errors(draws, mean, cov)
        rows.append({"probe": i, "mean_err": mean_err, "mean_rel_err": relative_mean_error(draws, mean),
                     "cov_err": cov_err})
    probes = pd.DataFrame(rows)
    result = ConditionalAccuracy(float(probes["mean_err"].mean()), float(probes["cov_err"].mean()), probes,
                                 float(probes["mean_rel_err"].mean()))
    logger.info("conditional accuracy over %d probes: mean_err %.4f mean_rel_err %.4f cov_err %.4f",
                num_probes, result.mean_err, result.mean_rel_err, result.cov_err)
    return result
