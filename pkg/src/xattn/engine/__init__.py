from .gradcheck import NonSmoothWarning, grad_check
from .io import load_tensor, read_tensor, save_tensor, tensor_to_bytes, write_tensor
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    create,
    elementwise,
    expand,
    gelu,
    getitem,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    no_grad,
    permute,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    square,
    sub,
    take_rows,
)

__all__ = [
    "NonSmoothWarning", "Tensor", "add", "as_tensor", "backward", "create",
    "elementwise", "expand", "gelu", "getitem", "grad_check", "layer_norm",
    "load_tensor", "masked_fill", "matmul", "mul", "no_grad", "permute",
    "read_tensor", "reduce", "reduce_max", "reduce_mean", "reduce_min",
    "reduce_sum", "reshape", "save_tensor", "scale", "sigmoid",
    "softmax_lastdim", "square", "sub", "take_rows", "tensor_to_bytes",
    "write_tensor",
]
