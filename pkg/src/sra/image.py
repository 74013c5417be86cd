"""Frames, chroma conversion, raw YUV I/O and network-range normalisation.

Rounding anywhere in this package is round-half-up on nonnegative values,
i.e. ``floor(v + 0.5)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

YUV420 = "420"
YUV444 = "444"
FORMATS = (YUV420, YUV444)


class FormatError(ValueError):
    """Wrong chroma format for the requested operation."""


class DimensionError(ValueError):
    """Frame or plane geometry not acceptable for the operation."""


class TruncationError(IOError):
    """Raw file shorter than the requested geometry implies."""


class RangeError(ValueError):
    """Sample outside the range allowed by the bit depth."""


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5)


def max_value(bit_depth: int) -> int:
    return (1 << bit_depth) - 1


def chroma_shape(width: int, height: int, fmt: str):
    if fmt == YUV420:
        return height // 2, width // 2
    return height, width


@dataclass(frozen=True)
class Frame:
    """Planar YCbCr picture. ``planes`` holds (Y, Cb, Cr) as uint16 arrays."""

    width: int
    height: int
    bit_depth: int
    format: str
    planes: tuple

    def __post_init__(self):
        if self.bit_depth not in (8, 10):
            raise ValueError(f"unsupported bit depth {self.bit_depth}")
        if self.format not in FORMATS:
            raise FormatError(f"unknown chroma format {self.format!r}")
        if self.format == YUV420 and (self.width % 2 or self.height % 2):
            raise DimensionError(
                f"4:2:0 needs even dimensions, got {self.width}x{self.height}")
        if len(self.planes) != 3:
            raise DimensionError("a frame has exactly three planes")
        planes = tuple(np.asarray(p) for p in self.planes)
        expected = [(self.height, self.width)] + 2 * [
            chroma_shape(self.width, self.height, self.format)]
        top = max_value(self.bit_depth)
        for name, p, shape in zip("YUV", planes, expected):
            if p.shape != shape:
                raise DimensionError(
                    f"plane {name} has shape {p.shape}, expected {shape}")
            if p.size and (p.min() < 0 or p.max() > top):
                raise RangeError(
                    f"plane {name} has samples outside [0, {top}]")
        planes = tuple(p.astype(np.uint16) for p in planes)
        for p in planes:
            p.flags.writeable = False
        object.__setattr__(self, "planes", planes)

    @property
    def y(self) -> np.ndarray:
        return self.planes[0]

    @classmethod
    def constant(cls, width, height, value, bit_depth=10, fmt=YUV420):
        cy, cx = chroma_shape(width, height, fmt)
        values = value if isinstance(value, (tuple, list)) else (value,) * 3
        return cls(width, height, bit_depth, fmt, (
            np.full((height, width), values[0]),
            np.full((cy, cx), values[1]),
            np.full((cy, cx), values[2]),
        ))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            (self.width, self.height, self.bit_depth, self.format)
            == (other.width, other.height, other.bit_depth, other.format)
            and all(np.array_equal(a, b) for a, b in zip(self.planes, other.planes))
        )

    __hash__ = None


def convert_420_to_444(f: Frame) -> Frame:
    """Nearest-neighbour chroma replication into 2x2 luma-sited blocks."""
    if f.format != YUV420:
        raise FormatError(f"expected 4:2:0 input, got {f.format}")
    up = [np.repeat(np.repeat(c, 2, axis=0), 2, axis=1) for c in f.planes[1:]]
    return Frame(f.width, f.height, f.bit_depth, YUV444, (f.y, *up))


def convert_444_to_420(f: Frame) -> Frame:
    """2x2 chroma mean, round half up."""
    if f.format != YUV444:
        raise FormatError(f"expected 4:4:4 input, got {f.format}")
    if f.width % 2 or f.height % 2:
        raise DimensionError(
            f"4:2:0 needs even dimensions, got {f.width}x{f.height}")
    down = []
    for c in f.planes[1:]:
        c = c.astype(np.int64)
        s = c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2]
        # floor(s/4 + 1/2) in integer arithmetic
        down.append((s + 2) // 4)
    return Frame(f.width, f.height, f.bit_depth, YUV420, (f.y, *down))


def frame_to_tensor(f: Frame) -> np.ndarray:
    """Return a (3, H, W) float32 tensor scaled to [0, 1]."""
    if f.format != YUV444:
        raise FormatError(f"expected 4:4:4 input, got {f.format}")
    scale = float(max_value(f.bit_depth))
    return (np.stack(f.planes).astype(np.float64) / scale).astype(np.float32)


def tensor_to_frame(t: np.ndarray, bit_depth: int = 10) -> Frame:
    """Clamp to [0, 1], scale to the sample range and round half up."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) tensor, got {t.shape}")
    top = max_value(bit_depth)
    v = round_half_up(np.clip(t.astype(np.float64), 0.0, 1.0) * top)
    _, h, w = t.shape
    return Frame(w, h, bit_depth, YUV444, tuple(v))


def frame_nbytes(width: int, height: int, bit_depth: int, fmt: str) -> int:
    cy, cx = chroma_shape(width, height, fmt)
    bps = 1 if bit_depth == 8 else 2
    return (width * height + 2 * cy * cx) * bps


def read_yuv(path, width, height, bit_depth=10, fmt=YUV420,
             frame_count=1) -> List[Frame]:
    """Read ``frame_count`` planar frames.

    Samples wider than 8 bits are little-endian 16-bit words.
    """
    if fmt == YUV420 and (width % 2 or height % 2):
        raise DimensionError(f"4:2:0 needs even dimensions, got {width}x{height}")
    per_frame = frame_nbytes(width, height, bit_depth, fmt)
    need = per_frame * frame_count
    size = os.path.getsize(path)
    if size < need:
        raise TruncationError(
            f"{path}: {size} bytes, need {need} for {frame_count} frame(s) "
            f"of {width}x{height} {fmt} {bit_depth}-bit")
    dtype = np.dtype("u1") if bit_depth == 8 else np.dtype("<u2")
    cy, cx = chroma_shape(width, height, fmt)
    raw = np.fromfile(path, dtype=dtype, count=need // dtype.itemsize)
    frames = []
    top = max_value(bit_depth)
    for n in range(frame_count):
        data = raw[n * (per_frame // dtype.itemsize):(n + 1) * (per_frame // dtype.itemsize)]
        y = data[:width * height].reshape(height, width)
        u = data[width * height:width * height + cy * cx].reshape(cy, cx)
        v = data[width * height + cy * cx:].reshape(cy, cx)
        if max(y.max(), u.max(), v.max()) > top:
            raise RangeError(
                f"{path}: frame {n} has samples above {top} for {bit_depth}-bit")
        frames.append(Frame(width, height, bit_depth, fmt, (y, u, v)))
    return frames


def write_yuv(path, frames: Iterable[Frame]) -> None:
    with open(path, "wb") as fh:
        for f in frames:
            dtype = np.dtype("u1") if f.bit_depth == 8 else np.dtype("<u2")
            for p in f.planes:
                fh.write(np.ascontiguousarray(p, dtype=dtype).tobytes())
