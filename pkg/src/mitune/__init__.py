"""Multimodal infusion tuning on a frozen, numpy-only micro transformer."""
from .autodiff import Tensor, grad_check, no_grad, parameter
from .config import RunConfig
from .infusion import MiTConfig, init_infusion, select_layers
from .model import MiTModel
from .transformer import LMConfig, MicroLM

__all__ = ["Tensor", "grad_check", "no_grad", "parameter", "RunConfig", "MiTConfig", "init_infusion",
           "select_layers", "MiTModel", "LMConfig", "MicroLM"]
__version__ = "0.1.0"
