from canopysr.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    expand,
    gelu,
    is_grad_enabled,
    layernorm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    permute,
    reshape,
    scale,
    slice_,
    softmax,
    sub,
    sum_,
)
from canopysr.autodiff.optim import AdamW, OptimizerState, adamw_step
from canopysr.autodiff.gradcheck import GradCheckResult, gradcheck

__all__ = [
    "Tensor", "add", "as_tensor", "concat", "expand", "gelu", "is_grad_enabled", "layernorm",
    "matmul", "mean", "mse", "mul", "no_grad", "permute", "reshape", "scale", "slice_",
    "softmax", "sub", "sum_", "AdamW", "OptimizerState", "adamw_step", "GradCheckResult",
    "gradcheck",
]
