"""Deterministic synthetic test content (stand-in for real training video)."""

from __future__ import annotations

import numpy as np

from .image import YUV420, Frame, max_value, round_half_up


def textured_planes(width, height, seed=0, components=12):
    """Three float planes in [0, 1]: oriented gratings over a smooth gradient.

    Chroma planes reuse the luma phases at lower contrast, so the channels
    are correlated the way natural YCbCr content is.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = 0.5 + 0.2 * np.sin(2 * np.pi * (xx / width * rng.uniform(0.3, 1.0)
                                            + yy / height * rng.uniform(0.3, 1.0)))
    tex = np.zeros_like(xx)
    for _ in range(components):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(2.5, 24.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.08)
        tex += amp * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    luma = base + tex
    cb = 0.5 + 0.3 * (base - 0.5) + 0.25 * tex
    cr = 0.5 - 0.2 * (base - 0.5) + 0.15 * tex
    return [np.clip(p, 0.0, 1.0) for p in (luma, cb, cr)]


def textured_frame(width, height, seed=0, bit_depth=10, fmt=YUV420) -> Frame:
    top = max_value(bit_depth)
    y, u, v = (round_half_up(p * top) for p in textured_planes(width, height, seed))
    if fmt == YUV420:
        # chroma taken as the 2x2 mean of the full-resolution pattern
        u, v = (round_half_up((c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2]) / 4)
                for c in (u, v))
    return Frame(width, height, bit_depth, fmt, (y, u, v))
