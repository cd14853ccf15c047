"""Typed run configuration.

A run is described by one `RunConfig` built from a named preset, optionally
overlaid with a JSON document and finally with command-line flags. Unknown
keys are rejected so a typo never silently falls back to a default.
"""
import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from core.errors import ConfigError

OBJECTIVES = ("cam", "mar_linear", "mar_rf", "givt", "givt_noise")
PROCESS_KINDS = ("linear_gaussian_ar1", "regime_switching")
GMM_OBJECTIVES = ("givt", "givt_noise")
CACHE_DIR_ENV = "CAM_CACHE_DIR"


def _positive(key, value):
    if value < 1:
        raise ConfigError(f"must be a positive integer, got {value}", key)


def _unit_interval(key, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"must lie in [0, 1], got {value}", key)


@dataclass
class BackboneConfig:
    num_layers: int = 4
    model_dim: int = 128
    mlp_mult: int = 4
    num_heads: int = 4
    max_context: int = 64
    input_dim: int = 8

    def validate(self, prefix="model.backbone"):
        for name in ("num_layers", "model_dim", "mlp_mult", "num_heads", "max_context", "input_dim"):
            _positive(f"{prefix}.{name}", getattr(self, name))
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}", f"{prefix}.num_heads")


@dataclass
class SamplerConfig:
    num_layers: int = 3
    model_dim: int = 128
    mlp_mult: int = 4
    input_dim: int = 8

    def validate(self, prefix="model.sampler"):
        for name in ("num_layers", "model_dim", "mlp_mult", "input_dim"):
            _positive(f"{prefix}.{name}", getattr(self, name))


@dataclass
class GMMHeadConfig:
    num_modes: int = 8
    input_dim: int = 128
    output_dim: int = 8

    def validate(self, prefix="model.gmm"):
        for name in ("num_modes", "input_dim", "output_dim"):
            _positive(f"{prefix}.{name}", getattr(self, name))


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gmm: GMMHeadConfig = field(default_factory=GMMHeadConfig)
    # deeper backbones for heads without a Sampler (16 -> 21 layers in the full-size setup)
    gmm_depth_ratio: float = 21 / 16

    def validate(self):
        self.backbone.validate()
        self.sampler.validate()
        self.gmm.validate()
        d = self.backbone.input_dim
        if self.sampler.input_dim != d or self.gmm.output_dim != d:
            raise ConfigError(
                f"embedding dims disagree: backbone {d}, sampler {self.sampler.input_dim}, gmm {self.gmm.output_dim}",
                "model",
            )
        if self.gmm.input_dim != self.backbone.model_dim:
            raise ConfigError("gmm.input_dim must equal backbone.model_dim (z width)", "model.gmm.input_dim")

    def set_embedding_dim(self, dim: int):
        self.backbone.input_dim = dim
        self.sampler.input_dim = dim
        self.gmm.output_dim = dim


@dataclass
class TrainConfig:
    objective: str = "cam"
    noise_augmentation: bool = True
    z_dropout_prob: float = 0.2
    batch_size: int = 64
    total_steps: int = 20000
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    # crops of L frames train conditioning on up to L - 1 previous frames
    context_length: int = 65
    seed: int = 0
    checkpoint_every: int = 5000
    sigma_distribution: str = "logit_normal"
    max_error_level: float = 1.0
    augment_sampler_target: bool = False
    precision: str = "float32"
    log_every: int = 500
    ddpm_train_steps: int = 1000
    prefetch: int = 4
    device: str = "cpu"

    def validate(self, prefix="train"):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}, choose from {OBJECTIVES}", f"{prefix}.objective")
        if self.objective == "cam" and not self.noise_augmentation:
            raise ConfigError("objective 'cam' requires noise_augmentation=true", f"{prefix}.noise_augmentation")
        if self.objective in ("mar_linear", "mar_rf", "givt") and self.noise_augmentation:
            raise ConfigError(f"objective {self.objective!r} trains on clean inputs; set noise_augmentation=false", f"{prefix}.noise_augmentation")
        if self.objective == "givt_noise" and not self.noise_augmentation:
            raise ConfigError("objective 'givt_noise' requires noise_augmentation=true", f"{prefix}.noise_augmentation")
        _unit_interval(f"{prefix}.z_dropout_prob", self.z_dropout_prob)
        _unit_interval(f"{prefix}.max_error_level", self.max_error_level)
        for name in ("batch_size", "total_steps", "context_length", "checkpoint_every", "log_every", "ddpm_train_steps"):
            _positive(f"{prefix}.{name}", getattr(self, name))
        if self.context_length < 2:
            raise ConfigError("context_length must be >= 2", f"{prefix}.context_length")
        if self.learning_rate <= 0:
            raise ConfigError("must be positive", f"{prefix}.learning_rate")
        if self.sigma_distribution not in ("logit_normal", "lognormal_clamped"):
            raise ConfigError(f"unknown sigma distribution {self.sigma_distribution!r}", f"{prefix}.sigma_distribution")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}", f"{prefix}.precision")

    @property
    def head_kind(self) -> str:
        return "gmm" if self.objective in GMM_OBJECTIVES else "sampler"


@dataclass
class GenerationConfig:
    num_steps_denoise: int = 50
    k_inf: float = 0.02
    temperature: float = 0.9
    target_length: int = 128
    context_window: int = 64
    seed: int = 0
    injection: str = "convex"
    use_cache: bool = True
    num_traces: int = 512
    variance_scaling: str = "std"

    def validate(self, prefix="generation"):
        for name in ("num_steps_denoise", "target_length", "context_window", "num_traces"):
            _positive(f"{prefix}.{name}", getattr(self, name))
        _unit_interval(f"{prefix}.k_inf", self.k_inf)
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}", f"{prefix}.temperature")
        if self.injection not in ("convex", "additive"):
            raise ConfigError(f"injection must be convex or additive, got {self.injection!r}", f"{prefix}.injection")
        if self.variance_scaling not in ("std", "variance"):
            raise ConfigError(f"variance_scaling must be std or variance, got {self.variance_scaling!r}", f"{prefix}.variance_scaling")


@dataclass
class ProcessConfig:
    kind: str = "linear_gaussian_ar1"
    dim: int = 8
    num_sequences: int = 2048
    length: int = 256
    contraction: float = 0.8
    switch_prob: float = 0.05
    seed: int = 1234
    normalize: bool = False

    def validate(self, prefix="process"):
        if self.kind not in PROCESS_KINDS:
            raise ConfigError(f"unknown process kind {self.kind!r}, choose from {PROCESS_KINDS}", f"{prefix}.kind")
        for name in ("dim", "num_sequences", "length"):
            _positive(f"{prefix}.{name}", getattr(self, name))
        if not 0.0 <= self.contraction < 1.0:
            raise ConfigError(f"contraction must lie in [0, 1) for a stationary process, got {self.contraction}", f"{prefix}.contraction")
        _unit_interval(f"{prefix}.switch_prob", self.switch_prob)


@dataclass
class MetricConfig:
    window: int = 64
    feature_seed: int = 7
    reference_size: int = 4096
    background_size: int = 512
    num_evaluations: int = 5
    accumulation_stride: int = 2
    conditional_probes: int = 16
    conditional_draws: int = 10000
    conditional_prefix: int = 16

    def validate(self, prefix="metrics"):
        for name in ("window", "reference_size", "background_size", "num_evaluations", "accumulation_stride",
                     "conditional_probes", "conditional_draws", "conditional_prefix"):
            _positive(f"{prefix}.{name}", getattr(self, name))


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    process: ProcessConfig = field(default_factory=ProcessConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.generation.validate()
        self.process.validate()
        self.metrics.validate()
        if self.process.dim != self.model.backbone.input_dim:
            raise ConfigError(
                f"process dim {self.process.dim} differs from model embedding dim {self.model.backbone.input_dim}",
                "process.dim",
            )
        if self.train.context_length - 1 > self.model.backbone.max_context:
            raise ConfigError("context_length - 1 must fit in backbone.max_context", "train.context_length")
        if self.generation.context_window > self.model.backbone.max_context:
            raise ConfigError("context_window exceeds backbone.max_context", "generation.context_window")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return architecture_hash(self.model, self.train.objective)

    def dump(self, directory) -> Path:
        path = Path(directory) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def architecture_hash(model: ModelConfig, objective: str) -> str:
    block = {"model": dataclasses.asdict(model), "head": "gmm" if objective in GMM_OBJECTIVES else "sampler"}
    if objective in GMM_OBJECTIVES:
        block["model"].pop("sampler")
    else:
        block["model"].pop("gmm")
    canonical = json.dumps(block, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _tiny() -> RunConfig:
    cfg = RunConfig(preset="tiny", out_dir="runs/tiny")
    cfg.model = ModelConfig(
        backbone=BackboneConfig(num_layers=2, model_dim=32, mlp_mult=2, num_heads=2, max_context=32, input_dim=4),
        sampler=SamplerConfig(num_layers=2, model_dim=32, mlp_mult=2, input_dim=4),
        gmm=GMMHeadConfig(num_modes=4, input_dim=32, output_dim=4),
    )
    cfg.train = TrainConfig(batch_size=8, total_steps=100, context_length=16, checkpoint_every=50, log_every=25, learning_rate=1e-3)
    cfg.generation = GenerationConfig(num_steps_denoise=10, target_length=32, context_window=15, num_traces=64)
    cfg.process = ProcessConfig(dim=4, num_sequences=256, length=64)
    cfg.metrics = MetricConfig(window=16, reference_size=512, background_size=48, num_evaluations=2,
                               accumulation_stride=4, conditional_probes=4, conditional_draws=2000, conditional_prefix=4)
    return cfg


def _desk() -> RunConfig:
    return RunConfig(preset="desk", out_dir="runs/desk")


def _large() -> RunConfig:
    cfg = RunConfig(preset="paper-150m", out_dir="runs/paper-150m")
    cfg.model = ModelConfig(
        backbone=BackboneConfig(num_layers=16, model_dim=768, mlp_mult=4, num_heads=4, max_context=128, input_dim=64),
        sampler=SamplerConfig(num_layers=8, model_dim=768, mlp_mult=4, input_dim=64),
        gmm=GMMHeadConfig(num_modes=32, input_dim=768, output_dim=64),
    )
    cfg.train = TrainConfig(batch_size=128, total_steps=400_000, learning_rate=1e-4, context_length=129, checkpoint_every=10_000)
    cfg.generation = GenerationConfig(target_length=256, context_window=128)
    cfg.process = ProcessConfig(dim=64, length=512)
    cfg.metrics = MetricConfig(window=128, reference_size=10_000, background_size=1000)
    return cfg


PRESETS = {
    "tiny": _tiny,
    "desk": _desk,
    "paper-150m": _large,
}


def get_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}", "preset")
    return PRESETS[name]()


def apply_overrides(obj, overrides: dict, prefix: str = ""):
    """Recursively merge a plain dict into a dataclass tree, rejecting unknown keys."""
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError("unknown key", path)
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", path)
            apply_overrides(current, value, prefix=f"{path}.")
            continue
        setattr(obj, key, _coerce(current, value, path))
    return obj


def _coerce(current, value, path):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", path)
    return value


def load_run_config(preset: str = "desk", config_path=None, overrides: dict | None = None,
                    base: RunConfig | None = None) -> RunConfig:
    """preset (or `base`, e.g. a checkpoint's stored config), then the JSON document, then flags."""
    document = {}
    if config_path:
        try:
            document = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path} is not valid JSON: {e}", "config")
        if not isinstance(document, dict):
            raise ConfigError(f"{config_path} must hold a JSON object", "config")
        if "preset" in document:
            preset, base = document.pop("preset"), None
    cfg = clone(base) if base is not None else get_preset(preset)
    apply_overrides(cfg, document)
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


def clone(cfg: RunConfig) -> RunConfig:
    return copy.deepcopy(cfg)


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_DIR_ENV, Path.home() / ".cache" / "cam"))
