from .tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    make_op,
    no_grad,
    reset_tape,
)
from .ops import (
    abs_,
    add,
    add_per_channel,
    concat_channels,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    detach,
    dropout,
    elementwise,
    global_avg_pool,
    group_norm,
    linear,
    mul,
    negate,
    reduce,
    reduce_mean,
    reduce_sum,
    scale,
    self_attention,
    shift,
    sigmoid,
    sqrt,
    square,
    sub,
    swish,
)
from .gradcheck import numeric_grad, relative_error

__all__ = [name for name in dir() if not name.startswith("_")]
