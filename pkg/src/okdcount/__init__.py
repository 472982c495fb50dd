"""Online teacher-student distillation for crowd-density regression.

A shared-stem two-branch network trains a compact student alongside its
teacher in a single run; distillation aligns pooled feature statistics,
cross-block relation matrices, and the density maps themselves. Built on a
small float64 autodiff core whose hot kernels have a compiled backend with
a pure-numpy fallback.
"""

from ._kernels import BACKEND as kernel_backend
from .data import AnnotatedScene, SceneParams, density_from_points, make_dataset
from .distill import LossWeights, total_loss
from .model import BlockSpec, BranchConfig, Model, desk_config, full_config, scale_widths
from .tensor import Parameter, Tensor, grad_check, no_grad
from .train import Adam, TrainConfig, evaluate, train_run

__version__ = "0.1.0"

__all__ = [
    "AnnotatedScene",
    "Adam",
    "BlockSpec",
    "BranchConfig",
    "LossWeights",
    "Model",
    "Parameter",
    "SceneParams",
    "Tensor",
    "TrainConfig",
    "density_from_points",
    "desk_config",
    "evaluate",
    "full_config",
    "grad_check",
    "kernel_backend",
    "make_dataset",
    "no_grad",
    "scale_widths",
    "total_loss",
    "train_run",
    "__version__",
]
