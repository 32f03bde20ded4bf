"""Multi-exit convolutional networks on a small numpy autodiff engine.

Modules: ``tensor``/``functional``/``nn`` (autodiff and layers), ``blocks`` and
``model`` (branches and backbones), ``training``, ``cost``, ``exits`` (early-exit
policies), ``probe`` (feature-reconstruction probe), ``data``/``formats``/``cli``.
"""

from .cost import FlopsReport, adaptive_flops, flops_report
from .exits import ExitPolicy, LogitTrace, calibrate, export_trace, predict_adaptive, simulate
from .model import BranchPattern, MultiExitModel, build_model
from .tensor import Tensor
from .training import TrainConfig, distill_loss, joint_loss, train

__version__ = "0.1.0"

__all__ = [
    "BranchPattern", "ExitPolicy", "FlopsReport", "LogitTrace", "MultiExitModel", "Tensor",
    "TrainConfig", "adaptive_flops", "build_model", "calibrate", "distill_loss", "export_trace",
    "flops_report", "joint_loss", "predict_adaptive", "simulate", "train",
]
