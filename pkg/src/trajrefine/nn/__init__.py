from .tensor import Tensor, NonFiniteError, as_tensor, concat, stack
from .modules import (
    Parameter,
    Module,
    Linear,
    MLP,
    LayerNorm,
    MultiHeadAttention,
    SetAbstraction,
    ball_query,
)
from .optim import Adam, SGD
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "NonFiniteError", "as_tensor", "concat", "stack",
    "Parameter", "Module", "Linear", "MLP", "LayerNorm",
    "MultiHeadAttention", "SetAbstraction", "ball_query",
    "Adam", "SGD",
    "GradCheckReport", "grad_check",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
