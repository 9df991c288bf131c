from pshape.autodiff.ops import (
    add,
    concat_cols,
    concat_many,
    kl_divergence,
    matmul_bias,
    mean_of,
    relu,
    reparameterize,
    reshape,
    set_maxpool,
    slice_cols,
    slice_rows,
    softmax_cross_entropy,
    squared_error,
    sum_all,
    tanh_act,
    weighted_sum,
)
from pshape.autodiff.tape import Gradients, Parameter, Tape, Tensor2, backward

__all__ = [
    "Gradients",
    "Parameter",
    "Tape",
    "Tensor2",
    "add",
    "backward",
    "concat_cols",
    "concat_many",
    "kl_divergence",
    "matmul_bias",
    "mean_of",
    "relu",
    "reparameterize",
    "reshape",
    "set_maxpool",
    "slice_cols",
    "slice_rows",
    "softmax_cross_entropy",
    "squared_error",
    "sum_all",
    "tanh_act",
    "weighted_sum",
]
