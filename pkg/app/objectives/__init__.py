from config.settings import OBJECTIVES
from core.errors import ConfigError
from .diffusion_objectives import NoisePredictionObjective, RectifiedFlowObjective
from .mixture_objective import GaussianMixtureObjective
from .objective_base import LossOutput, TrainingObjective

objectives = {
    "cam": RectifiedFlowObjective("cam", noise_augmentation=True),
    "mar_rf": RectifiedFlowObjective("mar_rf", noise_augmentation=False),
    "mar_linear": NoisePredictionObjective("mar_linear", noise_augmentation=False),
    "givt": GaussianMixtureObjective("givt", noise_augmentation=False),
    "givt_noise": GaussianMixtureObjective("givt_noise", noise_augmentation=True),
}


def get_objective(name: str) -> TrainingObjective:
    if name not in objectives:
        raise ConfigError(f"unknown objective {name!r}, choose from {OBJECTIVES}", "train.objective")
    return objectives[name]
