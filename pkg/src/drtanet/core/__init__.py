from .tensor import ParamStore, Tensor, backward, default_dtype, grad_enabled, no_grad, precision
from .ops import (
    add,
    avgpool2x,
    batch_norm,
    bilinear_upsample2x,
    batch_slice,
    concat_batch,
    concat_channels,
    conv2d,
    dot_last,
    masked_softmax,
    maxpool2d,
    mean,
    mul,
    relu,
    scale,
    total,
)
from .gradcheck import NonDeterministicError, finite_difference_gradcheck
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ParamStore",
    "Tensor",
    "backward",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "precision",
    "add",
    "avgpool2x",
    "batch_norm",
    "bilinear_upsample2x",
    "batch_slice",
    "concat_batch",
    "concat_channels",
    "conv2d",
    "dot_last",
    "masked_softmax",
    "maxpool2d",
    "mean",
    "mul",
    "relu",
    "scale",
    "total",
    "NonDeterministicError",
    "finite_difference_gradcheck",
    "load_checkpoint",
    "save_checkpoint",
]
