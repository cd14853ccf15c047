"""Autoregressive generation for every model variant.

Each position draws from its own substream keyed by (trace, position), so a
continuation from a prefix reproduces the tail of a full-length run and
batched generation matches one-at-a-time generation.

Context handling: while the fed-back sequence fits in `context_window` the
Backbone either extends a KV cache or recomputes the prefix; once it is longer,
only the last `context_window` fed-back embeddings are used, recomputed from
position 0.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from config.settings import GenerationConfig
from core.ddpm import DEFAULT_TRAIN_STEPS, ddpm_sample
from core.errors import ConfigError, ContextOverflowError, DimensionMismatchError, GenerationError
from core.flow_math import inject_inference_noise, integrate_rf_ode
from core.rng import RngStream
from data.embedding_file import write_embeddings
from models.cam_model import ContinuousAutoregressiveModel
from models.gmm_head import GMMParams, gmm_sample

logger = logging.getLogger(__name__)

BATCH_CHUNK = 64


@dataclass
class GenerationTrace:
    clean: torch.Tensor       # generated embeddings before injection, (length, d)
    fed_back: torch.Tensor    # what the Backbone saw for each of them, (length, d)
    step_us: list[float] = field(default_factory=list)
    seed: int = 0
    trace_index: int = 0
    prompt_length: int = 0

    def __len__(self):
        return int(self.clean.shape[0])

    def to_data_space(self, normalization: dict | None) -> "GenerationTrace":
        if not normalization:
            return self
        mean, std = normalization["mean"], normalization["std"]
        scale = lambda x: (x.double() * std + mean).to(x.dtype)
        return GenerationTrace(scale(self.clean), scale(self.fed_back), self.step_us, self.seed,
                               self.trace_index, self.prompt_length)


def generation_stream(cfg: GenerationConfig) -> RngStream:
    return RngStream(cfg.seed).split("generate")


def position_stream(rng: RngStream, trace_index: int, position: int) -> RngStream:
    return rng.split("trace", trace_index).split("position", position)


def _draw(streams, name, d, dtype, device):
    return torch.stack([s.split(name).normal((d,), dtype=dtype) for s in streams]).to(device)


def _sample_next(model: ContinuousAutoregressiveModel, z, streams, cfg: GenerationConfig):
    d = model.embedding_dim
    if model.head_kind == "gmm":
        gmm = model.gmm_head_forward(z)
        rows = [
            gmm_sample(GMMParams(gmm.weights[i:i + 1], gmm.means[i:i + 1], gmm.stddevs[i:i + 1]),
                       cfg.temperature, s.split("mode"), cfg.variance_scaling)
            for i, s in enumerate(streams)
        ]
        return torch.cat(rows)
    y_init = _draw(streams, "init", d, z.dtype, z.device)
    if model.objective == "mar_linear":
        total = model.metadata.get("ddpm_train_steps", DEFAULT_TRAIN_STEPS)
        return ddpm_sample(lambda y, t: model.sampler_forward(y, t.to(y.dtype) / total, z), y_init, cfg.num_steps_denoise, total)
    return integrate_rf_ode(lambda y, sigma: model.sampler_forward(y, sigma, z), y_init, cfg.num_steps_denoise)


class _Context:
    """Fed-back history of one batch of traces and how z is derived from it."""

    def __init__(self, model, window: int, use_cache: bool):
        self.model = model
        self.window = window
        self.fed: list[torch.Tensor] = []
        self.cache = model.new_cache() if use_cache else None
        self.cached = 0

    def append(self, x):
        self.fed.append(x)

    def condition(self, batch_size: int) -> torch.Tensor:
        n = len(self.fed)
        if n == 0:
            return self.model.z_sos.expand(batch_size, -1)
        if self.cache is not None and n <= self.window:
            new = torch.stack(self.fed[self.cached:], dim=1)
            self.cached = n
            return self.model.backbone_forward(new, self.cache)[:, -1]
        # past the window the cache can no longer be extended
        self.cache = None
        context = torch.stack(self.fed[-self.window:], dim=1)
        return self.model.backbone_forward(context)[:, -1]


@torch.no_grad()
def _generate_chunk(model, cfg: GenerationConfig, rng: RngStream, trace_indices: list[int],
                    prompts: torch.Tensor | None = None) -> list[GenerationTrace]:
    param = next(model.parameters())
    dtype, device = param.dtype, param.device
    d = model.embedding_dim
    batch = len(trace_indices)
    prompt_length = 0 if prompts is None else int(prompts.shape[1])
    if prompt_length > cfg.context_window:
        raise ContextOverflowError(prompt_length, cfg.context_window)
    if prompts is not None and prompts.shape[-1] != d:
        raise DimensionMismatchError("prompt", d, prompts.shape[-1])

    model.eval()
    context = _Context(model, cfg.context_window, cfg.use_cache)
    for p in range(prompt_length):
        streams = [position_stream(rng, i, p) for i in trace_indices]
        eps = _draw(streams, "inject", d, dtype, device)
        context.append(inject_inference_noise(prompts[:, p].to(device=device, dtype=dtype), eps, cfg.k_inf, cfg.injection))

    clean, fed, step_us = [], [], []
    for t in range(cfg.target_length):
        position = prompt_length + t
        start = time.perf_counter_ns()
        streams = [position_stream(rng, i, position) for i in trace_indices]
        z = context.condition(batch)
        x = _sample_next(model, z, streams, cfg)
        finite = torch.isfinite(x).all(dim=-1)
        if not finite.all():
            bad = int((~finite).nonzero()[0])
            raise GenerationError(position, trace_indices[bad])
        x_fed = inject_inference_noise(x, _draw(streams, "inject", d, dtype, device), cfg.k_inf, cfg.injection)
        context.append(x_fed)
        clean.append(x)
        fed.append(x_fed)
        step_us.append((time.perf_counter_ns() - start) / 1000.0)

    clean = torch.stack(clean, dim=1).cpu()
    fed = torch.stack(fed, dim=1).cpu()
    return [
        GenerationTrace(clean[b], fed[b], list(step_us), cfg.seed, idx, prompt_length)
        for b, idx in enumerate(trace_indices)
    ]


def generate(model: ContinuousAutoregressiveModel, cfg: GenerationConfig, rng: RngStream | None = None,
             trace_index: int = 0) -> GenerationTrace:
    """One trace of `target_length` embeddings, prompted only by z_SOS.

    Diffusion-head models integrate their ODE (or DDIM stride for the
    linear-schedule baseline); GMM-head models sample the mixture.
    """
    return _generate_chunk(model, cfg, rng or generation_stream(cfg), [trace_index])[0]


def generate_givt(model: ContinuousAutoregressiveModel, cfg: GenerationConfig, rng: RngStream | None = None,
                  trace_index: int = 0) -> GenerationTrace:
    if model.head_kind != "gmm":
        raise ConfigError(f"{model.objective} model has no GMM head", "train.objective")
    return generate(model, cfg, rng, trace_index)


def continue_sequence(model: ContinuousAutoregressiveModel, prompt: torch.Tensor, cfg: GenerationConfig,
                      rng: RngStream | None = None, trace_index: int = 0) -> GenerationTrace:
    """Generate `target_length` embeddings after `prompt` (length, d).

    The prompt is fed back with the same inference noise as generated
    embeddings, at the positions it occupies.
    """
    prompt = torch.as_tensor(prompt)
    if prompt.dim() != 2:
        raise ValueError(f"prompt must be (length, dim), got shape {tuple(prompt.shape)}")
    prompts = prompt.unsqueeze(0) if len(prompt) else None
    return _generate_chunk(model, cfg, rng or generation_stream(cfg), [trace_index], prompts)[0]


def generate_batch(model: ContinuousAutoregressiveModel, cfg: GenerationConfig, num_traces: int | None = None,
                   rng: RngStream | None = None, prompts: torch.Tensor | None = None,
                   chunk_size: int = BATCH_CHUNK) -> list[GenerationTrace]:
    """`num_traces` independent traces, computed `chunk_size` at a time.

    Trace i uses the same substreams as `generate(..., trace_index=i)`.
    """
    num_traces = num_traces or cfg.num_traces
    rng = rng or generation_stream(cfg)
    traces = []
    for start in range(0, num_traces, chunk_size):
        indices = list(range(start, min(start + chunk_size, num_traces)))
        chunk_prompts = None if prompts is None else prompts[indices[0]:indices[-1] + 1]
        traces.extend(_generate_chunk(model, cfg, rng, indices, chunk_prompts))
    logger.info("generated %d traces of length %d (k_inf=%g, %s injection)",
                num_traces, cfg.target_length, cfg.k_inf, cfg.injection)
    return traces


def export_traces(traces: list[GenerationTrace], out_dir, cfg: GenerationConfig, extra: dict | None = None) -> Path:
    """Write clean.came, fed_back.came and a traces.meta.json sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_embeddings(out_dir / "clean.came", [t.clean for t in traces])
    write_embeddings(out_dir / "fed_back.came", [t.fed_back for t in traces])
    meta = {
        "generation": vars(cfg).copy(),
        "traces": [
            {"index": t.trace_index, "seed": t.seed, "prompt_length": t.prompt_length, "step_us": t.step_us}
            for t in traces
        ],
    }
    meta.update(extra or {})
    path = out_dir / "traces.meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
