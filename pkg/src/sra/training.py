"""Training DSNet against the rate-distortion surrogate loss.

The loss for a full-resolution block ``x`` and network output ``y`` is::

    total = MSE(x, bicubic_up(y)) + lam * (MSE(lanczos3_down(x), y)
                                           + omega * (1 - MS-SSIM(lanczos3_down(x), y)))

The first term measures reconstruction distortion after simple-filter
up-sampling; the bracketed term stands in for the bitrate of the
low-resolution output. Gradients are derived by hand for every primitive and
propagated backwards along the op tape recorded by :mod:`sra.dsnet`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsnet import (
    DSNetConfig, Graph, ModelWeights, ShapeError, flatten_weights, im2col,
    init_weights, load_weights, read_tensor_file, run_graph, same_padding, save_weights,
    unflatten_weights, validate_weights, write_tensor_file,
)
from .metrics import ms_ssim_with_grad
from .resample import DOWN, UP, FilterKind, resize_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 30.0
    omega: float = 1.0 / 6.0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 200
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 100
    l2: float = 0.0
    msssim_scales: int = 3
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.lam < 0 or self.omega < 0 or self.learning_rate < 0:
            raise ValueError("lam, omega and learning_rate must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size, epochs and lr_decay_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class LossTerms:
    distortion: float
    rate_mse: float
    rate_msssim: float
    total: float

    @classmethod
    def combine(cls, distortion, rate_mse, rate_msssim, lam, omega):
        return cls(distortion, rate_mse, rate_msssim,
                   distortion + lam * (rate_mse + omega * rate_msssim))


# -- loss -----------------------------------------------------------------------

def _batched(a, hw):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 3 or a.shape[2:] != hw:
        raise ShapeError(f"expected (N, 3, {hw[0]}, {hw[1]}) blocks, got {a.shape}")
    return a


def loss_and_grad(x_orig, y_cnn, cfg: TrainConfig = TrainConfig(), grad=True):
    """Loss terms (averaged over the batch) and d(total)/d(y_cnn)."""
    y = np.asarray(y_cnn, dtype=np.float64)
    single = y.ndim == 3
    y = _batched(y, y.shape[-2:])
    x = _batched(x_orig, (2 * y.shape[2], 2 * y.shape[3]))
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} vs {y.shape[0]}")
    H, W = x.shape[2:]
    uy, ux = resize_matrix(FilterKind.BICUBIC, H // 2, UP), resize_matrix(FilterKind.BICUBIC, W // 2, UP)
    dy, dx = resize_matrix(FilterKind.LANCZOS3, H, DOWN), resize_matrix(FilterKind.LANCZOS3, W, DOWN)

    up = uy @ y @ ux.T
    y_l3 = dy @ x @ dx.T
    err_d = up - x
    err_r = y - y_l3
    distortion = float(np.mean(err_d * err_d))
    rate_mse = float(np.mean(err_r * err_r))
    ms, ms_grad = ms_ssim_with_grad(y_l3, y, cfg.msssim_scales, 1.0, grad=grad)
    rate_msssim = float(1.0 - np.mean(ms))
    terms = LossTerms.combine(distortion, rate_mse, rate_msssim, cfg.lam, cfg.omega)
    if not grad:
        return terms, None
    g = uy.T @ (2.0 * err_d / err_d.size) @ ux
    g += cfg.lam * (2.0 * err_r / err_r.size - cfg.omega * ms_grad / ms.size)
    return terms, (g[0] if single else g)


def loss_dsnet(x_orig, y_cnn, cfg: TrainConfig = TrainConfig()) -> LossTerms:
    return loss_and_grad(x_orig, y_cnn, cfg, grad=False)[0]


# -- backward primitives --------------------------------------------------------

def conv2d_backward(dy, x, weight, stride=1, need_dx=True, cols=None):
    """Gradients (dx, dweight, dbias) of a 'same' convolution, batched NCHW.

    ``cols`` may carry the forward pass's im2col matrix to skip rebuilding it.
    """
    dy = np.asarray(dy, dtype=np.float64)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if cols is None:
        cols, _ = im2col(np.asarray(x, dtype=np.float64), kh, kw, stride)
    ho, wo = dy.shape[2:]
    g = dy.reshape(n, o, ho * wo)
    dweight = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    dbias = g.sum(axis=(0, 2))
    if not need_dx:
        return None, dweight, dbias
    dcols = np.matmul(weight.reshape(o, -1).T.astype(np.float64), g)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    (pt, pb), (pl, pr) = same_padding(h, kh, stride), same_padding(w, kw, stride)
    dxp = np.zeros((n, c, h + pt + pb, w + pl + pr))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, pt:pt + h, pl:pl + w], dweight, dbias


def leaky_relu_backward(dy, x, slope):
    return dy * np.where(x >= 0, 1.0, slope)


def backprop(graph: Graph, output, d_output) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode sweep over a recorded graph.

    Returns ``{layer: (dweight, dbias)}``; ``graph.input_grads`` is left holding
    gradients of all recorded values keyed by ``id``.
    """
    if graph.tape is None:
        raise ValueError("graph was run without recording")
    grads = {id(output): np.asarray(d_output, dtype=np.float64)}
    pgrads: Dict[str, list] = {}

    def acc(arr, g):
        k = id(arr)
        grads[k] = grads[k] + g if k in grads else g

    for op in reversed(graph.tape):
        kind = op[0]
        if kind == "conv":
            _, name, x, y, cols = op
            g = grads.pop(id(y), None)
            if g is None:
                continue
            p = graph.w[name]
            dx, dw, db = conv2d_backward(g, x, p.weight, p.stride,
                                         need_dx=name != "down", cols=cols)
            if name in pgrads:
                pgrads[name][0] += dw
                pgrads[name][1] += db
            else:
                pgrads[name] = [dw, db]
            if dx is not None:
                acc(x, dx)
        elif kind == "lrelu":
            _, x, y = op
            g = grads.pop(id(y), None)
            if g is not None:
                acc(x, leaky_relu_backward(g, x, graph.slope))
        elif kind == "concat":
            _, xs, y = op
            g = grads.pop(id(y), None)
            if g is None:
                continue
            start = 0
            for part in xs:
                c = part.shape[1]
                acc(part, g[:, start:start + c])
                start += c
        elif kind == "add":
            _, a, b, y = op
            g = grads.pop(id(y), None)
            if g is not None:
                acc(a, g)
                acc(b, g)
    graph.input_grads = grads
    return {n: (g[0], g[1]) for n, g in pgrads.items()}


def _to_conv_params(params: Dict[str, np.ndarray], cfg: DSNetConfig) -> ModelWeights:
    w, _ = unflatten_weights(params, cfg)
    return w


def grad_loss(params: Dict[str, np.ndarray], batch, model_cfg: DSNetConfig,
              cfg: TrainConfig = TrainConfig()):
    """Loss terms and gradients for a batch of full-resolution blocks.

    ``params`` is the flat ``{entry name: array}`` form of the weights, the
    same naming as the weight file. Returns ``(LossTerms, grads)`` with grads
    keyed identically.
    """
    x = _batched(batch, np.asarray(batch).shape[-2:])
    w = _to_conv_params(params, model_cfg)
    y, graph = run_graph(x, w, model_cfg, dtype=np.float64, record=True)
    terms, gy = loss_and_grad(x, y, cfg)
    pg = backprop(graph, y, gy)
    grads = {}
    for name, p in w.items():
        dw, db = pg.get(name, (np.zeros(p.weight.shape), np.zeros(p.bias.shape)))
        grads[name] = dw
        grads[name + ".bias"] = db
    return terms, grads


# -- Adam -----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]):
        return cls({k: np.zeros(np.shape(a)) for k, a in params.items()},
                   {k: np.zeros(np.shape(a)) for k, a in params.items()}, 0)


def adam_step(params, grads, state: OptimizerState, cfg: TrainConfig, lr: Optional[float] = None):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    lr = cfg.learning_rate if lr is None else lr
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if cfg.l2:
            g = g + cfg.l2 * p
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t)


# -- loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: ModelWeights
    history: List[LossTerms] = field(default_factory=list)
    state: Optional[OptimizerState] = None
    steps: int = 0


def mean_terms(terms: Sequence[LossTerms], cfg: TrainConfig) -> LossTerms:
    d = float(np.mean([t.distortion for t in terms]))
    r = float(np.mean([t.rate_mse for t in terms]))
    s = float(np.mean([t.rate_msssim for t in terms]))
    return LossTerms.combine(d, r, s, cfg.lam, cfg.omega)


def evaluate(weights: ModelWeights, blocks, model_cfg: DSNetConfig,
             cfg: TrainConfig = TrainConfig(), batch_size: int = 16) -> LossTerms:
    """Mean loss over ``blocks`` with the float64 training forward pass."""
    blocks = np.asarray(blocks, dtype=np.float64)
    terms, sizes = [], []
    for i in range(0, len(blocks), batch_size):
        x = blocks[i:i + batch_size]
        y, _ = run_graph(x, weights, model_cfg, dtype=np.float64)
        terms.append(loss_and_grad(x, y, cfg, grad=False)[0])
        sizes.append(len(x))
    wts = np.array(sizes, dtype=np.float64) / sum(sizes)
    d = float(sum(w * t.distortion for w, t in zip(wts, terms)))
    r = float(sum(w * t.rate_mse for w, t in zip(wts, terms)))
    s = float(sum(w * t.rate_msssim for w, t in zip(wts, terms)))
    return LossTerms.combine(d, r, s, cfg.lam, cfg.omega)


def train(blocks, cfg: TrainConfig, model_cfg: DSNetConfig,
          init: Optional[ModelWeights] = None) -> TrainResult:
    """Adam training over shuffled mini-batches.

    Each epoch visits a fresh seeded permutation in full batches (a trailing
    partial batch is dropped). ``history`` holds the mean loss terms of every
    epoch, evaluated on the batches as they were trained.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 4 or len(blocks) < cfg.batch_size:
        raise ValueError(
            f"need at least batch_size={cfg.batch_size} blocks, got {len(blocks)}")
    if init is None:
        init = init_weights(model_cfg, cfg.seed)
    validate_weights(init, model_cfg)
    params = {k: a.astype(np.float64) for k, a in flatten_weights(init).items()}
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    history = []
    steps = 0
    per_epoch = len(blocks) // cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(blocks))
        epoch_terms = []
        for b in range(per_epoch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            terms, grads = grad_loss(params, blocks[idx], model_cfg, cfg)
            params, state = adam_step(params, grads, state, cfg, lr)
            epoch_terms.append(terms)
            steps += 1
        if not epoch_terms:
            break
        history.append(mean_terms(epoch_terms, cfg))
        log.info("epoch %d lr %.2e loss %.6f", epoch, lr, history[-1].total)
    weights = _to_conv_params({k: a.astype(np.float32) for k, a in params.items()}, model_cfg)
    return TrainResult(weights, history, state, steps)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(prefix, weights: ModelWeights, state: OptimizerState,
                    cfg: TrainConfig) -> List[str]:
    """Write ``prefix.dsnw`` plus Adam moments and a ``key value`` sidecar."""
    prefix = str(prefix)
    paths = [prefix + ".dsnw", prefix + ".adam_m.dsnw", prefix + ".adam_v.dsnw", prefix + ".opt.txt"]
    save_weights(weights, paths[0])
    write_tensor_file(paths[1], state.m)
    write_tensor_file(paths[2], state.v)
    with open(paths[3], "w") as fh:
        fh.write(f"step {state.step}\n")
        for k, v in asdict(cfg).items():
            fh.write(f"{k} {v}\n")
    return paths


def load_checkpoint(prefix, model_cfg: Optional[DSNetConfig] = None):
    prefix = str(prefix)
    weights, model_cfg = load_weights(prefix + ".dsnw", model_cfg)
    m = {k: a.astype(np.float64) for k, a in read_tensor_file(prefix + ".adam_m.dsnw").items()}
    v = {k: a.astype(np.float64) for k, a in read_tensor_file(prefix + ".adam_v.dsnw").items()}
    scalars = {}
    with open(prefix + ".opt.txt") as fh:
        for line in fh:
            k, _, val = line.strip().partition(" ")
            scalars[k] = val
    return weights, model_cfg, OptimizerState(m, v, int(scalars["step"])), scalars
