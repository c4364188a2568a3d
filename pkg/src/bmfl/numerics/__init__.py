"""Differentiable numerics: tensors, neural primitives, optimisation."""
from bmfl.numerics.functional import (
    cross_entropy,
    merge_heads,
    multi_head_attention,
    scaled_dot_attention,
    softmax_rows,
    split_heads,
)
from bmfl.numerics.gradcheck import grad_check, grad_check_report
from bmfl.numerics.nn import (
    MLP,
    Attention,
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    make_rng,
    split_rng,
    trunc_normal,
)
from bmfl.numerics.optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from bmfl.numerics.tensor import (
    Tensor,
    as_tensor,
    concat,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    pcc_rows,
    relu,
    softmax,
    sqrt,
    tanh,
)
