from .autograd import (
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    concat,
    conv1d,
    cosine_similarity,
    cross_entropy,
    div,
    exp,
    gelu,
    grad,
    index,
    is_grad_enabled,
    l1_loss,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    masked_select,
    matmul,
    max_,
    mean,
    mse_loss,
    mul,
    neg,
    no_grad,
    normalize,
    pad_time,
    power,
    relu,
    repeat,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    tanh,
    tensor,
    transpose,
    where,
)
from .rng import Rng, rng_normal
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm
from . import checkpoint, nn
