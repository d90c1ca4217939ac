from .gradcheck import GradcheckReport, gradcheck, rel_err
from .ops import (
    FlopCounter,
    RunningStats,
    avg_pool,
    batch_norm,
    bilinear_upsample2x,
    clamp,
    concat_channels,
    conv1d_channels,
    conv2d,
    count_flops,
    depthwise_conv2d,
    depthwise_separable_conv,
    global_avg_pool,
    layer_norm,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    sigmoid,
    slice_channels,
)
from .rng import Rng, kaiming_uniform
from .tensor import ShapeError, Tape, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "FlopCounter", "GradcheckReport", "Rng", "RunningStats", "ShapeError", "Tape", "Tensor",
    "avg_pool", "backward", "batch_norm", "bilinear_upsample2x", "clamp", "concat_channels",
    "conv1d_channels", "conv2d", "count_flops", "depthwise_conv2d", "depthwise_separable_conv",
    "global_avg_pool", "grad_enabled", "gradcheck", "kaiming_uniform", "layer_norm", "no_grad",
    "pixel_shuffle", "pixel_unshuffle", "rel_err", "relu", "sigmoid", "slice_channels",
]
