from .autodiff import Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, RerankModel
from .params import ParameterStore, adam_step

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "RerankModel",
    "Tensor",
    "adam_step",
    "backward",
    "load_checkpoint",
    "save_checkpoint",
]
