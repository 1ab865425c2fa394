"""Low-rank language-specific layers, fuse distillation and budget accounting on numpy."""

from .budget import ShapeParams, budget_full_model, budget_single_projection, flops_ratio
from .data import CipherTask, Vocab, default_task, gen_cipher_corpus, load_tsv
from .lms import LmsLinear, new_lms_linear
from .model import Model, ModelConfig, build_model, forward_model
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CipherTask",
    "LmsLinear",
    "Model",
    "ModelConfig",
    "ShapeParams",
    "TrainConfig",
    "Vocab",
    "budget_full_model",
    "budget_single_projection",
    "build_model",
    "default_task",
    "flops_ratio",
    "forward_model",
    "gen_cipher_corpus",
    "load_tsv",
    "new_lms_linear",
    "train",
]
