from . import ops
from .nn import Linear, init_linear, init_mlp, mlp_forward, mlp_parameters
from .optim import AdamState, adam_step, lr_schedule
from .tensor import (DiffTensor, ShapeError, StaleTapeError, Tape, as_tensor, backward,
                     get_dtype, precision, set_precision)

__all__ = [
    "ops", "DiffTensor", "Tape", "backward", "ShapeError", "StaleTapeError", "as_tensor",
    "set_precision", "get_dtype", "precision", "Linear", "init_linear", "init_mlp",
    "mlp_forward", "mlp_parameters", "AdamState", "adam_step", "lr_schedule",
]
