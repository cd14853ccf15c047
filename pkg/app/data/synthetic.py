"""Ground-truth sequence processes whose next-step conditionals are known in
closed form: a stationary linear-Gaussian AR(1) and a Markov regime-switching
mixture of such processes."""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.linalg import solve_discrete_lyapunov
from torch.distributions import MultivariateNormal

from config.settings import ProcessConfig
from core.errors import ConfigError, DimensionMismatchError
from core.rng import RngStream
from .dataset import Dataset

logger = logging.getLogger(__name__)


@dataclass
class RegimeParams:
    transition: torch.Tensor   # A, (d, d)
    offset: torch.Tensor       # b, (d,)
    noise_chol: torch.Tensor   # L, lower triangular (d, d)

    @property
    def noise_cov(self) -> torch.Tensor:
        return self.noise_chol @ self.noise_chol.T


@dataclass
class SyntheticProcessSpec:
    kind: str
    dim: int
    regimes: list[RegimeParams]
    switch_prob: float = 0.0
    initial_regime_probs: torch.Tensor | None = None
    seed: int = 0
    _moments: dict = field(default_factory=dict, repr=False)

    @property
    def transition(self) -> torch.Tensor:
        return self.regimes[0].transition

    @property
    def offset(self) -> torch.Tensor:
        return self.regimes[0].offset

    @property
    def noise_chol(self) -> torch.Tensor:
        return self.regimes[0].noise_chol

    @property
    def num_regimes(self) -> int:
        return len(self.regimes)

    def start_probs(self) -> torch.Tensor:
        if self.initial_regime_probs is not None:
            return self.initial_regime_probs.double()
        return torch.full((self.num_regimes,), 1.0 / self.num_regimes, dtype=torch.float64)

    def regime_transition_matrix(self) -> torch.Tensor:
        r = self.num_regimes
        if r == 1:
            return torch.ones(1, 1, dtype=torch.float64)
        p = self.switch_prob
        m = torch.full((r, r), p / (r - 1), dtype=torch.float64)
        m.fill_diagonal_(1.0 - p)
        return m

    def validate(self):
        if self.kind not in ("linear_gaussian_ar1", "regime_switching"):
            raise ConfigError(f"unsupported process kind {self.kind!r}", "process.kind")
        if self.kind == "linear_gaussian_ar1" and self.num_regimes != 1:
            raise ConfigError("linear_gaussian_ar1 takes exactly one regime", "process.regimes")
        for i, regime in enumerate(self.regimes):
            regime.transition = torch.as_tensor(regime.transition, dtype=torch.float64)
            regime.offset = torch.as_tensor(regime.offset, dtype=torch.float64)
            regime.noise_chol = torch.as_tensor(regime.noise_chol, dtype=torch.float64)
            if regime.transition.shape != (self.dim, self.dim):
                raise DimensionMismatchError(f"regime {i} transition", (self.dim, self.dim), tuple(regime.transition.shape))
            radius = torch.linalg.eigvals(regime.transition).abs().max().item()
            if radius >= 1.0:
                raise ConfigError(f"regime {i} transition has spectral radius {radius:.4f} >= 1 (not stationary)", "process.transition")
            chol = regime.noise_chol
            if not torch.equal(chol, torch.tril(chol)) or (torch.diagonal(chol) <= 0).any():
                raise ConfigError(f"regime {i} noise_chol must be lower triangular with a positive diagonal", "process.noise_chol")
        return self

    def stationary_moments(self, regime: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        """Stationary mean and covariance of one regime's AR(1) dynamics."""
        if regime not in self._moments:
            params = self.regimes[regime]
            a = params.transition.double()
            eye = torch.eye(self.dim, dtype=torch.float64)
            mean = torch.linalg.solve(eye - a, params.offset.double())
            cov = solve_discrete_lyapunov(a.numpy(), params.noise_cov.double().numpy())
            cov = torch.from_numpy(np.asarray(cov, dtype=np.float64))
            self._moments[regime] = (mean, 0.5 * (cov + cov.T))
        return self._moments[regime]


def random_orthogonal(dim: int, rng: RngStream) -> torch.Tensor:
    q, r = torch.linalg.qr(rng.normal((dim, dim), dtype=torch.float64))
    return q * torch.sign(torch.diagonal(r))


def _unit_variance_chol(transition: torch.Tensor, rng: RngStream) -> torch.Tensor:
    dim = transition.shape[0]
    m = rng.normal((dim, dim), dtype=torch.float64)
    spd = m @ m.T / dim + 0.5 * torch.eye(dim, dtype=torch.float64)
    cov = solve_discrete_lyapunov(transition.numpy(), spd.numpy())
    scale = 1.0 / float(np.mean(np.diag(cov)))
    return torch.linalg.cholesky(scale * spd)


def default_process_spec(kind: str = "linear_gaussian_ar1", dim: int = 8, seed: int = 1234,
                         contraction: float = 0.8, switch_prob: float = 0.05) -> SyntheticProcessSpec:
    """AR(1) with A = contraction * orthogonal and unit stationary variance on
    average, or two such regimes with opposite offsets."""
    rng = RngStream(seed).split("process", kind)
    if kind == "linear_gaussian_ar1":
        a = contraction * random_orthogonal(dim, rng.split("A"))
        regime = RegimeParams(a, torch.zeros(dim, dtype=torch.float64), _unit_variance_chol(a, rng.split("L")))
        return SyntheticProcessSpec(kind, dim, [regime], seed=seed).validate()
    if kind == "regime_switching":
        direction = rng.split("offset").normal((dim,), dtype=torch.float64)
        direction = direction / direction.norm()
        regimes = []
        for r, sign in enumerate((1.0, -1.0)):
            a = contraction * random_orthogonal(dim, rng.split("A", r))
            # offset b places the regime mean at +/- 1.5 along `direction`
            b = (torch.eye(dim, dtype=torch.float64) - a) @ (1.5 * sign * direction)
            regimes.append(RegimeParams(a, b, _unit_variance_chol(a, rng.split("L", r))))
        return SyntheticProcessSpec(kind, dim, regimes, switch_prob=switch_prob, seed=seed).validate()
    raise ConfigError(f"unsupported process kind {kind!r}", "process.kind")


def spec_from_config(cfg: ProcessConfig) -> SyntheticProcessSpec:
    return default_process_spec(cfg.kind, cfg.dim, cfg.seed, cfg.contraction, cfg.switch_prob)


def _sample_sequence(spec: SyntheticProcessSpec, length: int, rng: RngStream) -> torch.Tensor:
    d = spec.dim
    w = rng.split("w").normal((length, d), dtype=torch.float64)
    u = rng.split("regime").uniform((length,), dtype=torch.float64)
    trans = spec.regime_transition_matrix()
    cum_start = torch.cumsum(spec.start_probs(), 0)
    regime = min(int(torch.searchsorted(cum_start, u[0:1] * cum_start[-1], right=True).item()), spec.num_regimes - 1)

    mean, cov = spec.stationary_moments(regime)
    out = torch.empty(length, d, dtype=torch.float64)
    out[0] = mean + torch.linalg.cholesky(cov) @ w[0]
    for t in range(1, length):
        if spec.num_regimes > 1:
            cum = torch.cumsum(trans[regime], 0)
            regime = min(int(torch.searchsorted(cum, u[t:t + 1] * cum[-1], right=True).item()), spec.num_regimes - 1)
        p = spec.regimes[regime]
        out[t] = p.transition @ out[t - 1] + p.offset + p.noise_chol @ w[t]
    return out


def sample_process(spec: SyntheticProcessSpec, num_sequences: int, length: int, rng: RngStream) -> Dataset:
    """Draw sequences starting from the stationary distribution.

    Each sequence has its own substream, so results do not depend on how the
    work is split.
    """
    spec.validate()
    sequences = [
        _sample_sequence(spec, length, rng.split("sequence", i)).float()
        for i in range(num_sequences)
    ]
    logger.info("sampled %d %s sequences of length %d (dim %d)", num_sequences, spec.kind, length, spec.dim)
    return Dataset(sequences, provenance=f"{spec.kind}(dim={spec.dim}, seed={spec.seed})")


def _regime_log_likelihood(spec, prefix):
    """log p(x_s | regime r, x_{s-1}) for every s and r, shape (len, R)."""
    rows = []
    for r, params in enumerate(spec.regimes):
        mean0, cov0 = spec.stationary_moments(r)
        first = MultivariateNormal(mean0, covariance_matrix=cov0).log_prob(prefix[0]).reshape(1)
        if len(prefix) > 1:
            pred = prefix[:-1] @ params.transition.double().T + params.offset.double()
            rest = MultivariateNormal(pred, scale_tril=params.noise_chol.double()).log_prob(prefix[1:])
            rows.append(torch.cat((first, rest)))
        else:
            rows.append(first)
    return torch.stack(rows, dim=-1)


def regime_posterior(spec: SyntheticProcessSpec, prefix: torch.Tensor) -> torch.Tensor:
    """Forward-filtered probability of each regime at the last prefix position."""
    prefix = torch.as_tensor(prefix, dtype=torch.float64)
    log_lik = _regime_log_likelihood(spec, prefix)
    log_trans = torch.log(spec.regime_transition_matrix().clamp_min(1e-300))
    log_alpha = torch.log(spec.start_probs().clamp_min(1e-300)) + log_lik[0]
    for s in range(1, len(prefix)):
        log_alpha = torch.logsumexp(log_alpha.unsqueeze(1) + log_trans, dim=0) + log_lik[s]
    return torch.softmax(log_alpha, dim=0)


def oracle_mixture(spec: SyntheticProcessSpec, prefix: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Next-step conditional as a mixture: (weights (R,), means (R, d), covs (R, d, d))."""
    prefix = torch.as_tensor(prefix, dtype=torch.float64)
    if prefix.dim() != 2 or len(prefix) == 0:
        raise ValueError("prefix must be a non-empty (length, dim) sequence")
    if prefix.shape[-1] != spec.dim:
        raise DimensionMismatchError("oracle prefix", spec.dim, prefix.shape[-1])
    if spec.kind not in ("linear_gaussian_ar1", "regime_switching"):
        raise ConfigError(f"unsupported process kind {spec.kind!r}", "process.kind")
    last = prefix[-1]
    means = torch.stack([p.transition.double() @ last + p.offset.double() for p in spec.regimes])
    covs = torch.stack([p.noise_cov.double() for p in spec.regimes])
    if spec.kind == "linear_gaussian_ar1":
        return torch.ones(1, dtype=torch.float64), means, covs
    weights = spec.regime_transition_matrix().T @ regime_posterior(spec, prefix)
    return weights, means, covs


def oracle_conditional(spec: SyntheticProcessSpec, prefix: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact mean and covariance of the next embedding given a non-empty prefix."""
    weights, means, covs = oracle_mixture(spec, prefix)
    if len(weights) == 1:
        return means[0], covs[0]
    mean = weights @ means
    second = torch.einsum("r,rij->ij", weights, covs + means.unsqueeze(-1) * means.unsqueeze(-2))
    return mean, second - torch.outer(mean, mean)
