from .autodiff import Tensor
from .checkpoint import load_checkpoint, model_hash, save_checkpoint
from .model import Classifier, LinearClassifier, ResNetMini, ResNetMiniConfig, ShapeError
from .train import TrainHyper, TrainingConfigError, TrainReport, train

__all__ = [
    "Classifier",
    "LinearClassifier",
    "ResNetMini",
    "ResNetMiniConfig",
    "ShapeError",
    "Tensor",
    "TrainHyper",
    "TrainReport",
    "TrainingConfigError",
    "load_checkpoint",
    "model_hash",
    "save_checkpoint",
    "train",
]
