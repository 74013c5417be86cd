"""Learned down-sampling for spatial resolution adaptation in video coding."""

from .dsnet import DSNetConfig, TINY, dsnet_forward, load_weights, save_weights
from .image import Frame, read_yuv, write_yuv
from .metrics import bd_rate, ms_ssim, psnr_luma
from .resample import FilterKind, downsample2x, upsample2x

__version__ = "0.1.0"

__all__ = [
    "DSNetConfig", "TINY", "dsnet_forward", "load_weights", "save_weights",
    "Frame", "read_yuv", "write_yuv", "bd_rate", "ms_ssim", "psnr_luma",
    "FilterKind", "downsample2x", "upsample2x",
]
