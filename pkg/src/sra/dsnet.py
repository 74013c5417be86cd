"""DSNet: a residual dense down-sampling network, inference only.

The network maps a (3, 96, 96) YCbCr 4:4:4 block in [0, 1] to a (3, 48, 48)
block. Its output is a learned residual added to a bilinear 2x down-sampling
of the input, so an all-zero network is exactly the bilinear down-sampler.

Layer names (the weight schema) for ``num_rdb = R`` and ``rdb_layers = L``::

    down                    3x3 stride-2 conv, 3 -> B, LReLU        (D0)
    feat                    3x3 conv, B -> B, LReLU                  (F0)
    cascade{i}, i = 2..R    1x1 conv over [D0, G1..G(i-1)], LReLU  -> input of RDB i
    rdb{i}.conv{k}, k=1..L  3x3 dense conv, growth channels, LReLU
    rdb{i}.fuse             1x1 local fusion back to B, then + RDB input
    rl1                     1x1 conv over [D0, G1..GR], LReLU, then + F0
    rl2                     3x3 conv, LReLU
    out                     3x3 conv to 3 channels, linear (the residual)

Convolutions compute in float64. In inference mode activations are stored
as float32 between layers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .resample import FilterKind, resize_matrix, DOWN

MAGIC = b"DSNW"
VERSION = 1


class WeightFormatError(ValueError):
    """Malformed or schema-incompatible weight file."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DSNetConfig:
    num_rdb: int = 14
    base_channels: int = 64
    rdb_layers: int = 5
    rdb_growth: int = 32
    lrelu_slope: float = 0.2

    def __post_init__(self):
        for f in ("num_rdb", "base_channels", "rdb_layers", "rdb_growth"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ValueError("lrelu_slope must lie in (0, 1)")


# 2 RDBs, 8 channels: small enough for finite-difference checks and desk training
TINY = DSNetConfig(num_rdb=2, base_channels=8, rdb_layers=3, rdb_growth=8)


@dataclass
class ConvParams:
    name: str
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray    # (out,)
    stride: int = 1

    @property
    def shape(self):
        return self.weight.shape


ModelWeights = Dict[str, ConvParams]


def layer_schema(cfg: DSNetConfig) -> List[Tuple[str, int, int, int, int]]:
    """Ordered (name, out_channels, in_channels, kernel, stride) for every conv."""
    B, G, L, R = cfg.base_channels, cfg.rdb_growth, cfg.rdb_layers, cfg.num_rdb
    schema = [("down", B, 3, 3, 2), ("feat", B, B, 3, 1)]
    for i in range(1, R + 1):
        if i > 1:
            schema.append((f"cascade{i}", B, i * B, 1, 1))
        for k in range(1, L + 1):
            schema.append((f"rdb{i}.conv{k}", G, B + (k - 1) * G, 3, 1))
        schema.append((f"rdb{i}.fuse", B, B + L * G, 1, 1))
    schema += [("rl1", B, (R + 1) * B, 1, 1), ("rl2", B, B, 3, 1), ("out", 3, B, 3, 1)]
    return schema


def param_count(cfg: DSNetConfig) -> int:
    B, G, L, R = cfg.base_channels, cfg.rdb_growth, cfg.rdb_layers, cfg.num_rdb
    rdb = sum((B + k * G) * G * 9 + G for k in range(L)) + (B + L * G) * B + B
    return (
        (27 * B + B)                              # down
        + (9 * B * B + B)                         # feat
        + B * B * (R * (R + 1) // 2 - 1) + (R - 1) * B  # cascades 2..R
        + R * rdb
        + ((R + 1) * B * B + B)                   # rl1
        + (9 * B * B + B)                         # rl2
        + (27 * B + 3)                            # out
    )


def zero_weights(cfg: DSNetConfig) -> ModelWeights:
    return {
        name: ConvParams(name, np.zeros((o, i, k, k), np.float32),
                         np.zeros(o, np.float32), s)
        for name, o, i, k, s in layer_schema(cfg)
    }


def init_weights(cfg: DSNetConfig, seed: int = 0, out_gain: float = 0.1) -> ModelWeights:
    """He-normal weights (scaled for the leaky slope), zero biases.

    The residual-producing ``out`` layer is further scaled by ``out_gain`` so a
    fresh network starts close to the bilinear down-sampler.
    """
    rng = np.random.default_rng(seed)
    w = {}
    for name, o, i, k, s in layer_schema(cfg):
        std = np.sqrt(2.0 / ((1 + cfg.lrelu_slope ** 2) * i * k * k))
        if name == "out":
            std *= out_gain
        w[name] = ConvParams(name, (rng.standard_normal((o, i, k, k)) * std).astype(np.float32),
                             np.zeros(o, np.float32), s)
    return w


def validate_weights(w: ModelWeights, cfg: DSNetConfig) -> None:
    schema = layer_schema(cfg)
    expected = {name for name, *_ in schema}
    extra = sorted(set(w) - expected)
    if extra:
        raise WeightFormatError(f"unexpected layer {extra[0]!r}")
    for name, o, i, k, s in schema:
        if name not in w:
            raise WeightFormatError(f"missing layer {name!r}")
        p = w[name]
        if p.weight.shape != (o, i, k, k):
            raise WeightFormatError(
                f"layer {name!r}: weight shape {p.weight.shape}, expected {(o, i, k, k)}")
        if p.bias.shape != (o,):
            raise WeightFormatError(
                f"layer {name!r}: bias shape {p.bias.shape}, expected {(o,)}")
        if not (np.isfinite(p.weight).all() and np.isfinite(p.bias).all()):
            raise WeightFormatError(f"layer {name!r}: non-finite parameters")


def config_from_weights(w: ModelWeights, lrelu_slope: float = 0.2) -> DSNetConfig:
    """Recover the architecture hyper-parameters from layer shapes."""
    try:
        base = w["down"].weight.shape[0]
        num_rdb = sum(1 for n in w if n.startswith("rdb") and n.endswith(".fuse"))
        layers = sum(1 for n in w if n.startswith("rdb1.conv"))
        growth = w["rdb1.conv1"].weight.shape[0]
    except KeyError as e:
        raise WeightFormatError(f"missing layer {e.args[0]!r}") from None
    except IndexError:
        raise WeightFormatError("layer 'down' or 'rdb1.conv1' has no output axis") from None
    try:
        cfg = DSNetConfig(num_rdb, base, layers, growth, lrelu_slope)
    except ValueError as e:
        raise WeightFormatError(f"cannot infer architecture: {e}") from None
    validate_weights(w, cfg)
    return cfg


# -- primitives ---------------------------------------------------------------

def same_padding(n: int, k: int, stride: int) -> Tuple[int, int]:
    """(before, after) zero padding giving ceil(n / stride) outputs, extra on the far side."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Columns of shape (N, C*kh*kw, Ho*Wo), ordered to match a reshaped (O, C, kh, kw) kernel."""
    n, c, h, w = x.shape
    ph, pw = same_padding(h, kh, stride), same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw)) if (sum(ph) or sum(pw)) else x
    ho, wo = -(-h // stride), -(-w // stride)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1,
           return_cols: bool = False):
    """Zero-padded 'same' cross-correlation of (C, H, W) or (N, C, H, W) input.

    Output spatial size is ceil(in / stride); odd padding goes to the bottom
    and right. Accumulates and returns float64.
    """
    single = x.ndim == 3
    xb = np.asarray(x, dtype=np.float64)
    if single:
        xb = xb[None]
    if xb.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv expects {weight.shape[1]} input channels, got {xb.shape[1]}")
    o, _, kh, kw = weight.shape
    cols, (ho, wo) = im2col(xb, kh, kw, stride)
    y = np.matmul(weight.reshape(o, -1).astype(np.float64), cols)
    y += bias.astype(np.float64)[None, :, None]
    y = y.reshape(xb.shape[0], o, ho, wo)
    if single:
        y = y[0]
    return (y, cols) if return_cols else y


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def bilinear_downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    return resize_matrix(FilterKind.BILINEAR, h, DOWN) @ np.asarray(x, np.float64) \
        @ resize_matrix(FilterKind.BILINEAR, w, DOWN).T


# -- forward ------------------------------------------------------------------

class Graph:
    """Runs the primitives and, when ``record`` is set, keeps a tape of them."""

    def __init__(self, weights: ModelWeights, slope: float, dtype, record: bool):
        self.w = weights
        self.slope = slope
        self.dtype = dtype
        self.tape: Optional[list] = [] if record else None

    def _store(self, v):
        return v.astype(self.dtype, copy=False)

    def conv(self, x, name):
        p = self.w[name]
        if self.tape is None:
            return self._store(conv2d(x, p.weight, p.bias, p.stride))
        y, cols = conv2d(x, p.weight, p.bias, p.stride, return_cols=True)
        y = self._store(y)
        self.tape.append(("conv", name, x, y, cols))
        return y

    def lrelu(self, x):
        y = self._store(leaky_relu(x, self.slope))
        if self.tape is not None:
            self.tape.append(("lrelu", x, y))
        return y

    def concat(self, xs):
        if len(xs) == 1:
            return xs[0]
        y = np.concatenate(xs, axis=1)
        if self.tape is not None:
            self.tape.append(("concat", list(xs), y))
        return y

    def add(self, a, b):
        y = self._store(a.astype(np.float64) + b)
        if self.tape is not None:
            self.tape.append(("add", a, b, y))
        return y

    def rdb(self, x, i, layers):
        feats = [x]
        for k in range(1, layers + 1):
            feats.append(self.lrelu(self.conv(self.concat(feats), f"rdb{i}.conv{k}")))
        return self.add(self.conv(self.concat(feats), f"rdb{i}.fuse"), x)


def run_graph(x: np.ndarray, weights: ModelWeights, cfg: DSNetConfig,
              dtype=np.float32, record: bool = False):
    """Forward pass on a (N, 3, H, W) batch. Returns (output, graph)."""
    g = Graph(weights, cfg.lrelu_slope, dtype, record)
    x = x.astype(dtype, copy=False)
    d0 = g.lrelu(g.conv(x, "down"))
    f0 = g.lrelu(g.conv(d0, "feat"))
    outs = [d0]
    h = f0
    for i in range(1, cfg.num_rdb + 1):
        if i > 1:
            h = g.lrelu(g.conv(g.concat(outs), f"cascade{i}"))
        outs.append(g.rdb(h, i, cfg.rdb_layers))
    s = g.add(g.lrelu(g.conv(g.concat(outs), "rl1")), f0)
    residual = g.conv(g.lrelu(g.conv(s, "rl2")), "out")
    base = g._store(bilinear_downsample(x))
    y = g.add(residual, base)
    return y, g


def dsnet_forward(x: np.ndarray, weights: ModelWeights, cfg: DSNetConfig) -> np.ndarray:
    """Down-sample one (3, H, W) block, or an (N, 3, H, W) batch, by 2."""
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[1] != 3:
        raise ShapeError(f"expected (3, H, W) or (N, 3, H, W) input, got {x.shape}")
    if xb.shape[2] % 2 or xb.shape[3] % 2:
        raise ShapeError(f"input dimensions must be even, got {x.shape[-2:]}")
    validate_weights(weights, cfg)
    y, _ = run_graph(xb, weights, cfg, np.float32)
    return y[0] if single else y


# -- weight files ---------------------------------------------------------------

def write_tensor_file(path, entries: Dict[str, np.ndarray]) -> None:
    """Write named float32 tensors in the DSNW container."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensor_file(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    name = "<header>"

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFormatError(f"{path}: truncated in entry {name!r}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    entries = {}
    for n in range(count):
        name = f"<entry {n}>"
        (length,) = struct.unpack("<H", take(2))
        try:
            name = take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"{path}: undecodable name in entry {n}") from None
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = math.prod(dims)
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name in entries:
            raise WeightFormatError(f"{path}: duplicate entry {name!r}")
        entries[name] = arr
    if pos != len(data):
        raise WeightFormatError(f"{path}: {len(data) - pos} trailing bytes after last entry")
    return entries


def flatten_weights(w: ModelWeights) -> Dict[str, np.ndarray]:
    """Map to file entries: ``name`` for the kernel, ``name.bias`` for the bias."""
    out = {}
    for name, p in w.items():
        out[name] = p.weight
        out[name + ".bias"] = p.bias
    return out


def unflatten_weights(entries: Dict[str, np.ndarray], cfg: Optional[DSNetConfig] = None,
                      lrelu_slope: float = 0.2) -> Tuple[ModelWeights, DSNetConfig]:
    w = {}
    for name, arr in entries.items():
        if name.endswith(".bias"):
            continue
        if name + ".bias" not in entries:
            raise WeightFormatError(f"layer {name!r} has no bias entry")
        w[name] = ConvParams(name, arr, entries[name + ".bias"], 2 if name == "down" else 1)
    for name in entries:
        if name.endswith(".bias") and name[:-5] not in w:
            raise WeightFormatError(f"bias {name!r} has no matching layer")
    if cfg is None:
        cfg = config_from_weights(w, lrelu_slope)
    else:
        validate_weights(w, cfg)
    ordered = {name: w[name] for name, *_ in layer_schema(cfg)}
    return ordered, cfg


def save_weights(w: ModelWeights, path) -> None:
    write_tensor_file(path, flatten_weights(w))


def load_weights(path, cfg: Optional[DSNetConfig] = None,
                 lrelu_slope: float = 0.2) -> Tuple[ModelWeights, DSNetConfig]:
    """Load and schema-check a weight file.

    Without ``cfg`` the architecture is inferred from the stored shapes.
    """
    return unflatten_weights(read_tensor_file(path), cfg, lrelu_slope)
