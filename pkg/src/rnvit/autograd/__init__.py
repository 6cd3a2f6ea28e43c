from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, gradcheck_params, numeric_grad, relative_error
from .losses import bce_with_logits, cross_entropy, mse, nt_xent
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
)
