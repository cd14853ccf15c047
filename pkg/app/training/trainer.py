"""Optimization loop shared by every objective.

One `train_step` serves CAM, MAR, MAR-RF, GIVT and GIVT+noise: the objective
registry supplies the loss, everything else (RNG keying, finiteness checks,
AdamW update) is common.
"""
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pandas as pd
import torch
from tqdm import tqdm

from core.errors import ConfigError, NonFiniteLossError
from data.dataset import Dataset, make_batch
from objectives import get_objective
from reports.charts import read_csv, write_csv
from storage.checkpoint import save_checkpoint
from .train_state import TrainState

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "train_metrics/1"
METRICS_COLUMNS = ["step", "wall_ms", "loss", "grad_norm"]


def _norm_report(model, batch) -> dict:
    report = {"batch": float(batch.detach().double().norm())}
    params = [p for p in model.parameters()]
    report["params"] = float(torch.stack([p.detach().double().norm() for p in params]).norm())
    grads = [p.grad for p in params if p.grad is not None]
    if grads:
        report["grads"] = float(torch.stack([g.detach().double().norm() for g in grads]).norm())
    return report


def train_step(state: TrainState, batch: torch.Tensor) -> tuple[TrainState, float]:
    """One AdamW update on `batch` (batch, context_length, d).

    All randomness comes from the substream keyed by the current step, so the
    step is reproducible from (seed, step, batch) alone.
    """
    cfg = state.config.train
    if batch.shape[1] != cfg.context_length:
        raise ConfigError(f"batch length {batch.shape[1]} differs from context_length {cfg.context_length}", "train.context_length")
    objective = get_objective(cfg.objective)
    model = state.model
    model.train()
    batch = batch.to(device=cfg.device, dtype=state.dtype)
    rng = state.rng.split("step", state.step)

    state.optimizer.zero_grad(set_to_none=True)
    out = objective.compute_loss(model, batch, rng, cfg)
    if not torch.isfinite(out.loss):
        bad = (~torch.isfinite(out.per_sequence)).nonzero()
        raise NonFiniteLossError(state.step, int(bad[0]) if len(bad) else None, _norm_report(model, batch))
    out.loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), float("inf"))
    if not torch.isfinite(grad_norm):
        raise NonFiniteLossError(state.step, None, _norm_report(model, batch))
    state.optimizer.step()
    if not model.parameters_finite():
        raise NonFiniteLossError(state.step, None, _norm_report(model, batch))

    state.step += 1
    model.metadata["train_step"] = state.step
    loss = out.loss.item()
    state.update_running(loss, float(grad_norm))
    return state, loss


def _train_step_for(kinds, state, batch):
    if state.objective not in kinds:
        raise ConfigError(f"objective {state.objective!r} is not one of {kinds}", "train.objective")
    return train_step(state, batch)


def cam_train_step(state: TrainState, batch: torch.Tensor):
    """Rectified-flow step; with noise augmentation off this is MAR-RF."""
    return _train_step_for(("cam", "mar_rf"), state, batch)


def mar_linear_train_step(state: TrainState, batch: torch.Tensor):
    return _train_step_for(("mar_linear",), state, batch)


def givt_train_step(state: TrainState, batch: torch.Tensor):
    return _train_step_for(("givt", "givt_noise"), state, batch)


class Trainer:
    """Runs `train_step` over deterministic per-step batches with periodic
    checkpoints and a metrics CSV in `out_dir`."""

    def __init__(self, state: TrainState, dataset: Dataset, out_dir=None, progress: bool = True):
        self.state = state
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir else None
        self.progress = progress
        self.rows: list[dict] = []
        self.batch_rng = state.rng.split("data")
        if self.metrics_path and self.metrics_path.exists():
            previous = read_csv(self.metrics_path)
            self.rows = previous[previous["step"] <= state.step].to_dict("records")

    @property
    def metrics_path(self) -> Path | None:
        return self.out_dir / "train_metrics.csv" if self.out_dir else None

    @property
    def checkpoint_path(self) -> Path | None:
        return self.out_dir / "checkpoint.ckpt" if self.out_dir else None

    def _batches(self, first: int, last: int):
        cfg = self.state.config.train
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="batch") as pool:
            pending = deque()
            next_step = first
            while next_step < last or pending:
                while next_step < last and len(pending) < max(cfg.prefetch, 1):
                    pending.append(pool.submit(make_batch, self.dataset, next_step, cfg, self.batch_rng))
                    next_step += 1
                yield pending.popleft().result()

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def _persist(self, final: bool = False):
        if not self.out_dir:
            return
        write_csv(self.metrics_frame(), self.metrics_path, METRICS_SCHEMA)
        save_checkpoint(self.state, self.checkpoint_path)
        if not final:
            save_checkpoint(self.state, self.out_dir / "checkpoints" / f"step_{self.state.step:08d}.ckpt")

    def fit(self, num_steps: int | None = None) -> pd.DataFrame:
        cfg = self.state.config.train
        last = num_steps if num_steps is not None else cfg.total_steps
        first = self.state.step
        if first >= last:
            logger.info("checkpoint already at step %d of %d; nothing to train", first, last)
            return self.metrics_frame()
        logger.info("training %s from step %d to %d (batch %d, context %d)",
                    cfg.objective, first, last, cfg.batch_size, cfg.context_length)

        bar = tqdm(total=last - first, desc=f"train {cfg.objective}", disable=not self.progress)
        for batch in self._batches(first, last):
            start = time.perf_counter()
            _, loss = train_step(self.state, batch)
            wall_ms = (time.perf_counter() - start) * 1000.0
            step = self.state.step
            self.rows.append({"step": step, "wall_ms": wall_ms, "loss": loss,
                              "grad_norm": self.state.running["last_grad_norm"]})
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")
            if step % cfg.log_every == 0:
                logger.info("step %d loss %.5f (ema %.5f) grad_norm %.3f",
                            step, loss, self.state.running["loss_ema"], self.state.running["last_grad_norm"])
            if step % cfg.checkpoint_every == 0 and step < last:
                self._persist()
        bar.close()
        self._persist(final=True)
        return self.metrics_frame()
