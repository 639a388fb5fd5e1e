from .core import (
    FlopCounter,
    Tape,
    TapeError,
    Tensor,
    backward,
    count_flops_ctx,
    flop_scope,
    no_grad,
)
from .ops import (
    ConvSpec,
    ShapeError,
    add,
    avg_pool2d,
    batch_norm,
    concat_channels,
    conv2d,
    cross_entropy,
    mul_broadcast,
    prelu,
    relu,
    sigmoid,
    softmax_channels,
    split_channels,
    upsample_bilinear,
)

__all__ = [
    "ConvSpec",
    "FlopCounter",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "avg_pool2d",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "count_flops_ctx",
    "cross_entropy",
    "flop_scope",
    "mul_broadcast",
    "no_grad",
    "prelu",
    "relu",
    "sigmoid",
    "softmax_channels",
    "split_channels",
    "upsample_bilinear",
]
