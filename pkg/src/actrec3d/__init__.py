"""Video activity recognition with background subtraction and 3D CNNs."""

from .model_io import load_archive, save_archive
from .nn import ModelSpec, build_preset, init_params, model_backward, model_forward
from .optim import OptimConfig, OptimState, adam_step, decayed_lr, nadam_step
from .train_eval import TrainConfig, evaluate, predict, resolution_study, train
from .vision import Clip, PreprocessConfig, preprocess

__version__ = "0.1.0"

__all__ = [
    "Clip", "PreprocessConfig", "preprocess",
    "ModelSpec", "build_preset", "init_params", "model_forward", "model_backward",
    "OptimConfig", "OptimState", "adam_step", "nadam_step", "decayed_lr",
    "TrainConfig", "train", "evaluate", "predict", "resolution_study",
    "save_archive", "load_archive",
]
