"""Quality and rate metrics: luma PSNR, MS-SSIM, Bjontegaard delta rate, complexity ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from .image import DimensionError, Frame, max_value

# PSNR of identical pictures
LOSSLESS = math.inf

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03

ENCODER_STAGES = ("downsample", "inference", "encode")
DECODER_STAGES = ("decode", "upsample")


class CurveError(ValueError):
    """RD data unusable for a BD-rate fit."""


class OverlapError(CurveError):
    """RD curves share no PSNR range."""


@dataclass(frozen=True)
class RDPoint:
    bitrate: float
    psnr: float

    def __post_init__(self):
        if not self.bitrate > 0:
            raise CurveError(f"bitrate must be positive, got {self.bitrate}")
        if not math.isfinite(self.psnr):
            raise CurveError(f"PSNR must be finite, got {self.psnr}")


class RDCurve(tuple):
    """Rate-quality points, one per QP; at least four for the cubic fit.

    Higher quality must cost strictly more bits.
    """

    def __new__(cls, points: Iterable):
        pts = tuple(p if isinstance(p, RDPoint) else RDPoint(*p) for p in points)
        if len(pts) < 4:
            raise CurveError(f"need at least 4 RD points, got {len(pts)}")
        by_rate = sorted(pts, key=lambda p: p.bitrate)
        for a, b in zip(by_rate, by_rate[1:]):
            if not (b.bitrate > a.bitrate and b.psnr > a.psnr):
                raise CurveError(
                    "RD curve is not monotone: bitrate and PSNR must increase together")
        return super().__new__(cls, pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bitrate for p in self])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self])


# -- PSNR ---------------------------------------------------------------------

def psnr_from_mse(mse: float, bit_depth: int) -> float:
    if mse == 0:
        return LOSSLESS
    top = max_value(bit_depth)
    return 10.0 * math.log10(top * top / mse)


def _check_pair(ref: Frame, test: Frame):
    if (ref.width, ref.height, ref.bit_depth) != (test.width, test.height, test.bit_depth):
        raise DimensionError(
            f"geometry mismatch: {ref.width}x{ref.height}@{ref.bit_depth} vs "
            f"{test.width}x{test.height}@{test.bit_depth}")


def luma_mse(ref: Frame, test: Frame) -> float:
    _check_pair(ref, test)
    d = ref.y.astype(np.float64) - test.y.astype(np.float64)
    return float(np.mean(d * d))


def psnr_luma(ref: Frame, test: Frame) -> float:
    """Luma PSNR in dB; ``LOSSLESS`` (inf) when the luma planes are identical."""
    return psnr_from_mse(luma_mse(ref, test), ref.bit_depth)


def sequence_psnr(refs: Sequence[Frame], tests: Sequence[Frame]) -> float:
    """PSNR of the luma MSE pooled over all frames."""
    if len(refs) != len(tests) or not refs:
        raise DimensionError(f"frame count mismatch: {len(refs)} vs {len(tests)}")
    mse = float(np.mean([luma_mse(r, t) for r, t in zip(refs, tests)]))
    return psnr_from_mse(mse, refs[0].bit_depth)


# -- MS-SSIM ------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _valid_filter_matrix(n: int) -> np.ndarray:
    g = gaussian_window()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = g
    m.flags.writeable = False
    return m


def max_scales(h: int, w: int) -> int:
    s = 0
    while s < len(MSSSIM_WEIGHTS) and min(h, w) // (2 ** s) >= SSIM_WINDOW:
        s += 1
    return s


def scale_weights(scales: int) -> np.ndarray:
    w = np.array(MSSSIM_WEIGHTS[:scales])
    return w / w.sum()


def _pool(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _unpool(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[-2] * 2, g.shape[-1] * 2
    out[..., :h, :w] = 0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
    return out


def _signed_pow(v, w):
    return np.sign(v) * np.abs(v) ** w


def ms_ssim_with_grad(ref, test, scales=None, data_range=1.0, grad=True):
    """MS-SSIM over the last two axes, plus its gradient with respect to ``test``.

    Leading axes are treated as independent planes; the returned value has the
    leading shape. Per-scale statistics are raised to signed fractional powers
    so negative contrast-structure means stay defined.
    """
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(test, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    h, w = x.shape[-2:]
    fit = max_scales(h, w)
    if scales is None:
        scales = fit
    if scales < 1 or scales > fit:
        raise DimensionError(
            f"{h}x{w} planes support at most {fit} MS-SSIM scales, requested {scales}")
    weights = scale_weights(scales)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    xs, ys = [x], [y]
    for _ in range(scales - 1):
        xs.append(_pool(xs[-1]))
        ys.append(_pool(ys[-1]))

    stats, caches = [], []
    for j in range(scales):
        xj, yj = xs[j], ys[j]
        gy = _valid_filter_matrix(xj.shape[-2])
        gx = _valid_filter_matrix(xj.shape[-1])
        filt = lambda a: gy @ a @ gx.T  # noqa: E731
        mux, muy = filt(xj), filt(yj)
        sxx = filt(xj * xj) - mux * mux
        syy = filt(yj * yj) - muy * muy
        sxy = filt(xj * yj) - mux * muy
        num_cs = 2 * sxy + c2
        den_cs = sxx + syy + c2
        cs = num_cs / den_cs
        last = j == scales - 1
        if last:
            lum = (2 * mux * muy + c1) / (mux * mux + muy * muy + c1)
            stats.append(np.mean(lum * cs, axis=(-2, -1)))
        else:
            lum = None
            stats.append(np.mean(cs, axis=(-2, -1)))
        caches.append((gy, gx, mux, muy, cs, den_cs, lum))

    powered = [_signed_pow(s, wj) for s, wj in zip(stats, weights)]
    value = np.prod(powered, axis=0)
    if not grad:
        return value, None

    total = np.zeros(ys[-1].shape)
    for j in reversed(range(scales)):
        gy, gx, mux, muy, cs, den_cs, lum = caches[j]
        others = np.prod([p for k, p in enumerate(powered) if k != j], axis=0)
        dstat = weights[j] * np.abs(stats[j]) ** (weights[j] - 1) * others
        n = cs.shape[-2] * cs.shape[-1]
        dstat = np.asarray(dstat)[..., None, None] / n
        if lum is None:
            g_cs, g_l = dstat, None
        else:
            g_cs, g_l = dstat * lum, dstat * cs
        g_num = g_cs / den_cs
        g_den = -g_cs * cs / den_cs
        g_sxy = 2 * g_num
        g_syy = g_den
        g_muy = -mux * g_sxy - 2 * muy * g_syy
        if g_l is not None:
            q = mux * mux + muy * muy + c1
            g_muy = g_muy + g_l * (2 * mux / q - lum * 2 * muy / q)
        back = lambda a: gy.T @ a @ gx  # noqa: E731
        direct = back(g_muy) + 2 * ys[j] * back(g_syy) + xs[j] * back(g_sxy)
        if j < scales - 1:
            direct = direct + _unpool(total, ys[j].shape)
        total = direct
    return value, total


def ms_ssim(ref, test, scales=None, data_range=1.0) -> float:
    """Multi-scale SSIM of two 2-D planes (11x11 Gaussian window, sigma 1.5).

    With fewer than five scales the standard exponents are truncated and
    renormalised to sum to one.
    """
    ref = np.asarray(ref)
    if ref.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got shape {ref.shape}")
    value, _ = ms_ssim_with_grad(ref, test, scales, data_range, grad=False)
    return float(value)


# -- BD-rate ------------------------------------------------------------------

def _as_curve(c) -> RDCurve:
    return c if isinstance(c, RDCurve) else RDCurve(c)


def bd_rate(anchor, test) -> float:
    """Average bitrate difference of ``test`` against ``anchor``, in percent.

    Classic Bjontegaard: cubic fit of log10(rate) over PSNR, integrated over
    the common PSNR interval. Negative means ``test`` needs fewer bits.
    """
    anchor, test = _as_curve(anchor), _as_curve(test)
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise OverlapError(
            f"PSNR ranges do not overlap: anchor [{anchor.psnrs.min():.3f}, "
            f"{anchor.psnrs.max():.3f}], test [{test.psnrs.min():.3f}, {test.psnrs.max():.3f}]")
    # fit on a centred, scaled abscissa for conditioning
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    integrals = []
    for c in (anchor, test):
        p = np.polyfit((c.psnrs - mid) / half, np.log10(c.rates), 3)
        pi = np.polyint(p)
        integrals.append((np.polyval(pi, 1.0) - np.polyval(pi, -1.0)) / 2.0)
    return (10 ** (integrals[1] - integrals[0]) - 1) * 100.0


# -- complexity ---------------------------------------------------------------

def timing_report(anchor: Mapping[str, float], run: Mapping[str, float]) -> Dict[str, float]:
    """Relative encoder/decoder complexity of ``run`` against ``anchor`` timings.

    Encoder side is down-sampling, network inference and encoding; decoder side
    is decoding and up-sampling. Each ``<stage>_ratio`` is the stage time over
    the anchor's total on the same side, so they sum to the side's ratio.
    """
    if not anchor:
        raise ValueError("missing anchor timings")
    out = {}
    for side, stages in (("enc", ENCODER_STAGES), ("dec", DECODER_STAGES)):
        base = sum(anchor.get(s, 0.0) for s in stages)
        if base <= 0:
            raise ValueError(f"anchor has no {side}oder time")
        total = 0.0
        for s in stages:
            if s in run:
                out[f"{s}_ratio"] = run[s] / base
                total += run[s]
        out[f"{side}_ratio"] = total / base
    return out


def read_rd_file(path) -> RDCurve:
    """Read ``bitrate psnr`` lines, or ``qp bitrate psnr`` lines; '#' starts a comment."""
    pts: List[RDPoint] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (2, 3):
                raise CurveError(f"{path}:{lineno}: expected 2 or 3 columns")
            try:
                rate, q = float(fields[-2]), float(fields[-1])
            except ValueError:
                raise CurveError(f"{path}:{lineno}: not a number") from None
            pts.append(RDPoint(rate, q))
    return RDCurve(pts)
