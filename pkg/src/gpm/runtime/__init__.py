"""Minimal reverse-mode autodiff runtime on numpy arrays.

Supplies exactly the operations the rest of the package needs: dense linear
algebra, the usual nonlinearities, masked softmax attention, Gumbel-softmax
quantization, a Chamfer set-distance op, an AdamW optimizer, and a binary
checkpoint format.  Every differentiable op is verified against central
finite differences (see `gpm.runtime.gradcheck`).
"""

from gpm.runtime.tensor import (
    NumericFailure,
    Tensor,
    no_grad,
    add,
    mul,
    scale,
    matmul,
    concat,
    reshape,
    swapaxes,
    gather_rows,
    embedding_lookup,
    tensor_sum,
    tensor_mean,
    max_pool_over_set,
    mean_pool_over_set,
    relu,
    gelu,
    exp,
    log,
    xlogx,
    layer_norm,
    softmax_with_additive_mask,
    log_softmax,
    cross_entropy,
    dropout,
    sample_gumbel,
    gumbel_softmax,
    chamfer_distance_l1,
)
from gpm.runtime.modules import Module, Parameter, Linear, LayerNorm, stochastic_depth_scale
from gpm.runtime.optim import AdamW, cosine_schedule, clip_global_grad_norm
from gpm.runtime.checkpoint import save_arrays, load_arrays, save_module, load_into_module

__all__ = [
    "NumericFailure",
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "scale",
    "matmul",
    "concat",
    "reshape",
    "swapaxes",
    "gather_rows",
    "embedding_lookup",
    "tensor_sum",
    "tensor_mean",
    "max_pool_over_set",
    "mean_pool_over_set",
    "relu",
    "gelu",
    "exp",
    "log",
    "xlogx",
    "layer_norm",
    "softmax_with_additive_mask",
    "log_softmax",
    "cross_entropy",
    "dropout",
    "sample_gumbel",
    "gumbel_softmax",
    "chamfer_distance_l1",
    "Module",
    "Parameter",
    "Linear",
    "LayerNorm",
    "stochastic_depth_scale",
    "AdamW",
    "cosine_schedule",
    "clip_global_grad_norm",
    "save_arrays",
    "load_arrays",
    "save_module",
    "load_into_module",
]
