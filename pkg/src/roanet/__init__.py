"""Region-oriented attention toolkit: differentiable tensor engine, camera
geometry, attention-label rasterization, large-kernel attention blocks, and a
toy multi-camera training harness."""

from roanet.tensor import (
    EmptyOutput,
    IndivisibleExtent,
    ShapeMismatch,
    Tensor,
    absolute,
    add,
    avg_downsample,
    batch_norm,
    BatchNormParams,
    bilinear_sample,
    bilinear_upsample,
    concat,
    conv2d,
    fast_accumulation,
    fully_connected,
    global_avg_pool,
    grad_check,
    load_tensor,
    mean_all,
    mul,
    relu,
    reshape,
    save_tensor,
    scale,
    set_fast_accumulation,
    sigmoid,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "EmptyOutput",
    "IndivisibleExtent",
    "ShapeMismatch",
    "Tensor",
    "absolute",
    "add",
    "avg_downsample",
    "batch_norm",
    "BatchNormParams",
    "bilinear_sample",
    "bilinear_upsample",
    "concat",
    "conv2d",
    "fast_accumulation",
    "fully_connected",
    "global_avg_pool",
    "grad_check",
    "load_tensor",
    "mean_all",
    "mul",
    "relu",
    "reshape",
    "save_tensor",
    "scale",
    "set_fast_accumulation",
    "sigmoid",
    "sub",
    "sum_all",
    "transpose",
]

__version__ = "0.1.0"
