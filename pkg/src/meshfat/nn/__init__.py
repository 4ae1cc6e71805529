"""From-scratch differentiable layers and the two regressors built from them."""
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (MLP, BackwardError, BatchNorm1d, Conv2d, Linear, Module, Parameter, ReLU,
                     SageLayer, global_max_pool, global_max_pool_backward, sage_forward)
from .models import CnnModel, GnnModel, build_model

__all__ = [
    "MLP", "BackwardError", "BatchNorm1d", "Conv2d", "Linear", "Module", "Parameter", "ReLU",
    "SageLayer", "global_max_pool", "global_max_pool_backward", "sage_forward",
    "CnnModel", "GnnModel", "build_model", "load_checkpoint", "save_checkpoint",
]
