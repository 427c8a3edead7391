from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .network import (
    Hyper3DNetReg,
    ModelConfig,
    count_params,
    fc_head_params,
    init_params,
    layer_shapes,
    param_shapes,
)

__all__ = [
    "Checkpoint",
    "Hyper3DNetReg",
    "ModelConfig",
    "count_params",
    "fc_head_params",
    "init_params",
    "layer_shapes",
    "load_checkpoint",
    "param_shapes",
    "save_checkpoint",
]
