"""Everything a training run must persist to continue bit-identically."""
import threading
from dataclasses import dataclass, field

import torch

from config.settings import RunConfig
from core.rng import RngStream
from models.cam_model import ContinuousAutoregressiveModel, build_model

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}

# parameter init draws from the global torch generator
_init_lock = threading.Lock()


@dataclass
class TrainState:
    model: ContinuousAutoregressiveModel
    optimizer: torch.optim.Optimizer
    config: RunConfig
    step: int = 0
    rng: RngStream | None = None
    # per-dim statistics of the training corpus when it was normalized
    normalization: dict | None = None
    running: dict = field(default_factory=dict)

    @property
    def objective(self) -> str:
        return self.config.train.objective

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.config.train.precision]

    def update_running(self, loss: float, grad_norm: float, decay: float = 0.98):
        ema = self.running.get("loss_ema")
        self.running["loss_ema"] = loss if ema is None else decay * ema + (1 - decay) * loss
        self.running["last_loss"] = loss
        self.running["last_grad_norm"] = grad_norm


def build_optimizer(model, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def new_train_state(config: RunConfig, normalization: dict | None = None) -> TrainState:
    """Fresh model and optimizer; parameter init is seeded from the run seed."""
    cfg = config.train
    with _init_lock:
        torch.manual_seed(RngStream(cfg.seed).split("init").derived_seed)
        model = build_model(config.model, cfg.objective, device=cfg.device, dtype=PRECISIONS[cfg.precision])
    model.metadata["ddpm_train_steps"] = cfg.ddpm_train_steps
    return TrainState(
        model=model,
        optimizer=build_optimizer(model, cfg),
        config=config,
        rng=RngStream(cfg.seed).split("train"),
        normalization=normalization,
    )
