from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import bilinear_resize, conv1x1, conv2d, conv3x3, filter2d, gelu
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    clamp,
    concat,
    concat_channels,
    custom,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    square,
    stack,
    stop_gradient,
    sub,
    tanh,
    tsum,
    where,
)
