import pytest
import torch

from config.settings import clone, get_preset
from core.rng import RngStream
from data.synthetic import default_process_spec, sample_process
from models.cam_model import build_model

AUGMENTED = ("cam", "givt_noise")


@pytest.fixture
def tiny_config():
    return get_preset("tiny")


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def variant_config(tiny_config):
    """Tiny run config for one objective, with a consistent augmentation flag."""
    def make(objective="cam", **train_overrides):
        cfg = clone(tiny_config)
        cfg.train.objective = objective
        cfg.train.noise_augmentation = objective in AUGMENTED
        for key, value in train_overrides.items():
            setattr(cfg.train, key, value)
        return cfg.validate()
    return make


@pytest.fixture
def model_factory(tiny_config):
    def make(objective="cam", seed=0, dtype=torch.float32, model_config=None):
        torch.manual_seed(seed)
        return build_model(model_config or tiny_config.model, objective, dtype=dtype)
    return make


@pytest.fixture
def tiny_spec(tiny_config):
    return default_process_spec("linear_gaussian_ar1", dim=tiny_config.process.dim, seed=11)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return sample_process(tiny_spec, 16, 32, RngStream(5).split("tiny_dataset"))
