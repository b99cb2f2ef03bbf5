"""Small float64 autodiff kernel used by the forecasting model."""

from . import checkpoint
from .gradcheck import NondeterministicGraphError, finite_diff_check
from .optim import ParameterStore, adam_step
from .sparse import EdgeIndex, edge_aggregate, edge_scores, edge_softmax
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    dropout,
    einsum,
    getitem,
    layer_norm,
    matmul,
    mean,
    mul,
    neg,
    onehot,
    relu,
    reshape,
    scale,
    softmax,
    sqrt,
    square,
    sum_,
    swapaxes,
    take,
    transpose,
)

__all__ = [
    "EdgeIndex",
    "NondeterministicGraphError",
    "ParameterStore",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "checkpoint",
    "concat",
    "conv1d",
    "dropout",
    "edge_aggregate",
    "edge_scores",
    "edge_softmax",
    "einsum",
    "finite_diff_check",
    "getitem",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "neg",
    "onehot",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sqrt",
    "square",
    "sum_",
    "swapaxes",
    "take",
    "transpose",
]
