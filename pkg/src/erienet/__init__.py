"""Low-light RAW image enhancement: Bayer packing, a multi-scale network, wavelet losses, training."""

from .bayer import PackedRaw, RawMosaic, SidecarMeta, amplify, pack, unpack
from .losses import psnr, ssim_metric, total_loss
from .model import ERIENetParams, ModelConfig, build, flop_count, forward, param_count

__version__ = "0.1.0"

__all__ = [
    "ERIENetParams", "ModelConfig", "PackedRaw", "RawMosaic", "SidecarMeta", "amplify", "build", "flop_count",
    "forward", "pack", "param_count", "psnr", "ssim_metric", "total_loss", "unpack",
]
