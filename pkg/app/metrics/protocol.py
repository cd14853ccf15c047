"""FED / FED_acc and the error-accumulation curve.

FED compares the first window of every generated trace with windows of the
reference corpus; FED_acc does the same for the window right after it, so the
gap between the two shows how much quality drops once a model conditions on
its own output.
"""
import logging
from dataclasses import dataclass, field

import pandas as pd
import torch
from scipy.stats import kendalltau

from config.settings import MetricConfig
from core.errors import InsufficientSamplesError, SequenceTooShortError
from core.rng import RngStream
from data.dataset import Dataset
from .frechet import GaussianStats, frechet_distance, window_features

logger = logging.getLogger(__name__)


@dataclass
class FedResult:
    fed: float
    fed_acc: float
    fed_std: float = 0.0
    fed_acc_std: float = 0.0
    evaluations: list = field(default_factory=list)


@dataclass
class AccumulationCurve:
    frame: pd.DataFrame   # columns: position, distance, count
    tau: float
    p_value: float


def stack_traces(traces) -> torch.Tensor:
    """(N, length, d) float64 from GenerationTraces or tensors."""
    if isinstance(traces, torch.Tensor):
        return traces.double()
    rows = [getattr(t, "clean", t) for t in traces]
    return torch.stack([torch.as_tensor(r) for r in rows]).double()


def reference_windows(reference: Dataset, window: int, size: int, rng: RngStream) -> torch.Tensor:
    indices = rng.split("index").integers(0, len(reference), (size,)).tolist()
    out = []
    for j, idx in enumerate(indices):
        seq = reference.sequences[idx]
        if len(seq) < window:
            raise SequenceTooShortError(idx, len(seq), window)
        start = int(rng.split("offset", j).integers(0, len(seq) - window + 1, (1,)).item())
        out.append(seq[start:start + window])
    return torch.stack(out).double()


def fed_protocol(traces, reference: Dataset, window: int, cfg: MetricConfig) -> FedResult:
    """Mean Frechet distance over `num_evaluations` background draws."""
    data = stack_traces(traces)
    if data.shape[1] < 2 * window:
        raise SequenceTooShortError(0, data.shape[1], 2 * window, f"FED over two windows of {window}")
    num_features = 5 * data.shape[-1]
    if cfg.reference_size < 10 * cfg.background_size:
        logger.warning("reference set (%d) is smaller than 10x the background set (%d)",
                       cfg.reference_size, cfg.background_size)
    stream = RngStream(cfg.feature_seed).split("fed")
    ref_features = window_features(reference_windows(reference, window, cfg.reference_size, stream.split("reference")),
                                   cfg.feature_seed)
    ref_stats = GaussianStats.from_features(ref_features)

    first = window_features(data[:, :window], cfg.feature_seed)
    second = window_features(data[:, window:2 * window], cfg.feature_seed)
    background = cfg.background_size
    if len(data) < background:
        logger.warning("only %d traces for a background set of %d; using all of them", len(data), background)
        background = len(data)
    if background <= num_features:
        raise InsufficientSamplesError(background, num_features)

    evaluations = []
    for e in range(cfg.num_evaluations):
        pick = torch.randperm(len(data), generator=stream.split("background", e).generator)[:background]
        evaluations.append((
            frechet_distance(GaussianStats.from_features(first[pick]), ref_stats),
            frechet_distance(GaussianStats.from_features(second[pick]), ref_stats),
        ))
    values = torch.tensor(evaluations, dtype=torch.float64)
    mean = values.mean(dim=0)
    std = values.std(dim=0, unbiased=False)
    return FedResult(mean[0].item(), mean[1].item(), std[0].item(), std[1].item(), evaluations)


def accumulation_curve(traces, reference: Dataset, stride: int) -> AccumulationCurve:
    """Frechet distance of single frames per position bucket against the
    reference marginal, with Kendall's tau of distance against position."""
    data = stack_traces(traces)
    n, length, dim = data.shape
    if length <= stride:
        raise SequenceTooShortError(0, length, stride + 1, f"an accumulation curve with stride {stride}")
    ref_stats = GaussianStats.from_features(reference.frames().double())

    rows = []
    for start in range(0, length, stride):
        frames = data[:, start:start + stride].reshape(-1, dim)
        if len(frames) <= dim:
            logger.warning("skipping bucket at position %d: %d frames for %d dims", start, len(frames), dim)
            continue
        rows.append({
            "position": start,
            "distance": frechet_distance(GaussianStats.from_features(frames), ref_stats),
            "count": len(frames),
        })
    frame = pd.DataFrame(rows, columns=["position", "distance", "count"])
    if len(frame) < 2:
        return AccumulationCurve(frame, float("nan"), float("nan"))
    tau, p_value = kendalltau(frame["position"], frame["distance"])
    return AccumulationCurve(frame, float(tau), float(p_value))
