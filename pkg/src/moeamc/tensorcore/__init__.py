from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import (
    CE_CLAMP,
    attention,
    batch_norm,
    conv1d,
    cross_entropy,
    flatten,
    global_avg_pool,
    layer_norm,
    linear,
    matmul,
    max_pool1d,
    multi_head_attention,
    relu,
    sigmoid,
    softmax,
)
from .tensor import NonFiniteError, Tensor, as_tensor, backward, no_grad

__all__ = [
    "CE_CLAMP",
    "CheckpointError",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "attention",
    "backward",
    "batch_norm",
    "conv1d",
    "cross_entropy",
    "flatten",
    "global_avg_pool",
    "grad_check",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "max_pool1d",
    "multi_head_attention",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax",
]
