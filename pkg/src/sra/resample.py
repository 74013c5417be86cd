"""Separable 2x resampling with Lanczos3, Bicubic (Keys, a=-0.5) and Bilinear kernels.

Geometry uses pixel-centre alignment. Down-sampling output ``i`` sits on
input position ``2i + 0.5`` and the kernel is stretched by 2 (anti-aliased);
up-sampling output ``j`` sits on input position ``(j - 0.5) / 2`` with the
kernel at unit scale. Taps falling outside the signal are replicated from the
nearest edge sample and every row of tap weights is renormalised to sum to 1.

All filtering runs in float64. The public plane functions return float32;
the matrix helpers are used by the training code, which needs float64
throughout and the transposed operators for back-propagation.
"""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np

from .image import DimensionError, Frame, max_value, round_half_up


class FilterKind(str, enum.Enum):
    LANCZOS3 = "lanczos3"
    BICUBIC = "bicubic"
    BILINEAR = "bilinear"

    @property
    def radius(self) -> float:
        return _RADIUS[self]


_RADIUS = {FilterKind.LANCZOS3: 3.0, FilterKind.BICUBIC: 2.0, FilterKind.BILINEAR: 1.0}

DOWN = "down"
UP = "up"


def kernel_weight(kind, x):
    """Evaluate the continuous kernel at ``x`` (scalar or array)."""
    kind = FilterKind(kind)
    x = np.abs(np.asarray(x, dtype=np.float64))
    if kind is FilterKind.LANCZOS3:
        # np.sinc is the normalised sinc sin(pi x)/(pi x)
        w = np.where(x < 3.0, np.sinc(x) * np.sinc(x / 3.0), 0.0)
    elif kind is FilterKind.BICUBIC:
        a = -0.5
        w = np.where(
            x <= 1.0,
            (a + 2) * x**3 - (a + 3) * x**2 + 1,
            np.where(x < 2.0, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
        )
    else:
        w = np.maximum(0.0, 1.0 - x)
    return w if w.ndim else float(w)


@lru_cache(maxsize=256)
def _matrix(kind: FilterKind, n_in: int, direction: str) -> np.ndarray:
    if direction == DOWN:
        n_out, scale = n_in // 2, 2.0
        centers = 2.0 * np.arange(n_out) + 0.5
    else:
        n_out, scale = 2 * n_in, 1.0
        centers = (np.arange(n_out) - 0.5) / 2.0
    support = kind.radius * scale
    m = np.zeros((n_out, n_in))
    for i, c in enumerate(centers):
        taps = np.arange(int(np.floor(c - support)), int(np.ceil(c + support)) + 1)
        w = kernel_weight(kind, (taps - c) / scale)
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
        m[i] /= m[i].sum()
    m.flags.writeable = False
    return m


def resize_matrix(kind, n_in: int, direction: str) -> np.ndarray:
    """The 1-D resampling operator as an (n_out, n_in) float64 matrix."""
    kind = FilterKind(kind)
    if direction not in (DOWN, UP):
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if direction == DOWN and n_in % 2:
        raise DimensionError(f"down-sampling needs even dimensions, got {n_in}")
    if n_in < 1:
        raise DimensionError("empty plane")
    return _matrix(kind, n_in, direction)


def apply_separable(x: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    """Apply row/column operators to the last two axes of ``x``."""
    return my @ x @ mx.T


def resample2x(x, kind, direction: str) -> np.ndarray:
    """Resample the last two axes of ``x`` in float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError("expected at least a 2-D plane")
    h, w = x.shape[-2:]
    return apply_separable(x, resize_matrix(kind, h, direction),
                           resize_matrix(kind, w, direction))


def downsample2x(plane, kind) -> np.ndarray:
    return resample2x(plane, kind, DOWN).astype(np.float32)


def upsample2x(plane, kind) -> np.ndarray:
    return resample2x(plane, kind, UP).astype(np.float32)


def resample_frame(f: Frame, direction: str, kind) -> Frame:
    """Resample every plane independently and re-quantise."""
    top = max_value(f.bit_depth)
    planes = []
    for p in f.planes:
        r = resample2x(p.astype(np.float64), kind, direction)
        planes.append(np.clip(round_half_up(r), 0, top))
    h, w = planes[0].shape
    return Frame(w, h, f.bit_depth, f.format, tuple(planes))
