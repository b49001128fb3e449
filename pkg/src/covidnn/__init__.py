"""From-scratch CNN engine for COVID-19 screening on chest X-ray and CT images."""

from .estimator import ChestImageClassifier, make_network
from .exceptions import CovidNNError
from .metrics import ConfusionMatrix, MetricsReport, evaluate, roc_points
from .models import ModelSpec, Network, build_alexnet, build_proposed_cnn, replace_last_layers
from .tensor import seeded_rng
from .training import TrainConfig, TrainingCurve, multirun, train

__version__ = "0.1.0"

__all__ = [
    "ChestImageClassifier",
    "ConfusionMatrix",
    "CovidNNError",
    "MetricsReport",
    "ModelSpec",
    "Network",
    "TrainConfig",
    "TrainingCurve",
    "build_alexnet",
    "build_proposed_cnn",
    "evaluate",
    "make_network",
    "multirun",
    "replace_last_layers",
    "roc_points",
    "seeded_rng",
    "train",
]
