from .checkpoint import load_archive, save_archive
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, attention
from .optim import Adam, OptimizerState, optimizer_step
from .tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    cumsum,
    dropout,
    l2_normalize,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    stack,
)

__all__ = [
    "Adam", "LayerNorm", "Linear", "MLP", "Module", "MultiHeadAttention", "OptimizerState",
    "Parameter", "Tensor", "as_tensor", "attention", "broadcast_to", "concat", "cumsum",
    "dropout", "l2_normalize", "load_archive", "log_softmax", "matmul", "no_grad",
    "optimizer_step", "save_archive", "softmax", "stack",
]
