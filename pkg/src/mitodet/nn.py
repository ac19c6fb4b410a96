"""A small NHWC convolutional network engine written against numpy.

Supports exactly the layer kinds the detector needs: valid convolutions
(stride 1 or 2), non-overlapping max-pooling, dense layers, dropout,
(leaky) ReLU and a channel softmax. Networks built only from conv and
pointwise layers are fully convolutional: feeding a larger image yields a
dense output grid with stride equal to the product of conv strides.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidGamma, NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)

KINDS = ("conv", "maxpool", "dense", "dropout", "leaky_relu", "relu", "softmax")
LEAKY_SLOPE = 0.01
# Above this many im2col elements the conv switches to per-offset accumulation.
IM2COL_LIMIT = 1 << 24

# Table of the all-convolutional detector: (base filters, kernel, stride).
DETECTOR_CONVS = (
    (32, 3, 1), (32, 3, 2), (64, 3, 1), (64, 3, 2), (128, 3, 1),
    (128, 3, 1), (256, 3, 1), (256, 3, 1), (512, 14, 1),
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and self.filters < 1:
            raise ValueError(f"{self.kind} needs filters >= 1")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if min(self.kernel) < 1:
            raise ValueError("kernel must be >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass(frozen=True)
class NetworkSpec:
    gamma: float
    layers: tuple[LayerSpec, ...]
    input_size: int = 100
    channels: int = 3


def scaled_filters(base: int, gamma: float) -> int:
    return max(1, math.floor(base * gamma + 1e-9))


def build_network(gamma: float = 1.0, dropout: float = 0.5) -> NetworkSpec:
    """All-convolutional mitosis detector with filter counts scaled by ``gamma``."""
    if not 0.0 < gamma <= 1.0:
        raise InvalidGamma(f"gamma must lie in (0, 1], got {gamma}")
    layers: list[LayerSpec] = []
    for base, k, s in DETECTOR_CONVS:
        layers.append(LayerSpec("conv", scaled_filters(base, gamma), (k, k), s))
        layers.append(LayerSpec("leaky_relu"))
    layers.append(LayerSpec("dropout", rate=dropout))
    layers.append(LayerSpec("conv", 2, (1, 1), 1))
    layers.append(LayerSpec("softmax"))
    return NetworkSpec(gamma=gamma, layers=tuple(layers))


def build_pooled_network(gamma: float = 1.0, input_size: int = 100) -> NetworkSpec:
    """Five conv/max-pool pairs, dense 2048, dropout, dense 2 (PHH3 classifier)."""
    if not 0.0 < gamma <= 1.0:
        raise InvalidGamma(f"gamma must lie in (0, 1], got {gamma}")
    layers: list[LayerSpec] = []
    for base in (64, 128, 256, 512, 1024):
        layers.append(LayerSpec("conv", scaled_filters(base, gamma), (3, 3), 1))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", kernel=(2, 2), stride=2))
    layers += [
        LayerSpec("dense", scaled_filters(2048, gamma)),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", 2),
        LayerSpec("softmax"),
    ]
    return NetworkSpec(gamma=gamma, layers=tuple(layers), input_size=input_size)


def layer_shapes(spec: NetworkSpec, h: int | None = None, w: int | None = None):
    """Output (h, w, c) after every layer for an h x w input."""
    h = spec.input_size if h is None else h
    w = spec.input_size if w is None else w
    c = spec.channels
    shapes = []
    for ls in spec.layers:
        if ls.kind == "conv":
            kh, kw = ls.kernel
            if h < kh or w < kw:
                raise ShapeMismatch(f"input {h}x{w} smaller than kernel {kh}x{kw}")
            h = (h - kh) // ls.stride + 1
            w = (w - kw) // ls.stride + 1
            c = ls.filters
        elif ls.kind == "maxpool":
            kh, kw = ls.kernel
            if h < kh or w < kw:
                raise ShapeMismatch(f"input {h}x{w} smaller than pool {kh}x{kw}")
            h, w = h // kh, w // kw
        elif ls.kind == "dense":
            h, w, c = 1, 1, ls.filters
        shapes.append((h, w, c))
    return shapes


def param_shapes(spec: NetworkSpec):
    """(weight shape, bias shape) per layer, ``None`` for parameter-free layers."""
    out = []
    h, w, c = spec.input_size, spec.input_size, spec.channels
    for ls, (ho, wo, co) in zip(spec.layers, layer_shapes(spec)):
        if ls.kind == "conv":
            out.append(((ls.filters, c, *ls.kernel), (ls.filters,)))
        elif ls.kind == "dense":
            out.append(((ls.filters, h * w * c), (ls.filters,)))
        else:
            out.append(None)
        h, w, c = ho, wo, co
    return out


def param_count(spec: NetworkSpec) -> int:
    total = 0
    for shapes in param_shapes(spec):
        if shapes is not None:
            total += math.prod(shapes[0]) + math.prod(shapes[1])
    return total


@dataclass
class ModelParams:
    spec: NetworkSpec
    weights: list
    biases: list
    epoch: int = -1
    val_f1: float = float("nan")

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    @property
    def dtype(self):
        for wt in self.weights:
            if wt is not None:
                return wt.dtype
        return np.dtype(np.float32)


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for shapes in param_shapes(spec):
        if shapes is None:
            weights.append(None)
            biases.append(None)
            continue
        wshape, bshape = shapes
        fan_in = math.prod(wshape[1:])
        weights.append((rng.standard_normal(wshape) * math.sqrt(2.0 / fan_in)).astype(dtype))
        biases.append(np.zeros(bshape, dtype=dtype))
    return ModelParams(spec, weights, biases)


def zero_params(spec: NetworkSpec, dtype=np.float32) -> ModelParams:
    m = init_params(spec, np.random.default_rng(0), dtype)
    m.weights = [None if wt is None else np.zeros_like(wt) for wt in m.weights]
    return m


# ---------------------------------------------------------------- layer ops


def _window_slices(i, j, stride, ho, wo):
    return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride), slice(None))


def _im2col(x, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> rows ordered (kh, kw, c)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * x.shape[3])


def conv_forward(x, w, b, stride):
    n, h, wd, c = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeMismatch(f"conv expects {cw} channels, got {c}")
    if h < kh or wd < kw:
        raise ShapeMismatch(f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    row_cost = n * wo * kh * kw * c
    if row_cost * ho <= IM2COL_LIMIT:
        cols = _im2col(x, kh, kw, stride, ho, wo)
        out = (cols @ wmat).reshape(n, ho, wo, f)
        out += b
        return out, cols
    # Large inputs: im2col over bands of output rows; no cols cached.
    out = np.empty((n, ho, wo, f), dtype=np.result_type(x, w))
    band = max(1, IM2COL_LIMIT // row_cost)
    for r0 in range(0, ho, band):
        r1 = min(ho, r0 + band)
        xs = x[:, r0 * stride : (r1 - 1) * stride + kh]
        out[:, r0:r1] = (_im2col(xs, kh, kw, stride, r1 - r0, wo) @ wmat).reshape(n, r1 - r0, wo, f)
    out += b
    return out, None


def conv_backward(dout, x, w, stride, cols, need_dx=True):
    n, h, wd, c = x.shape
    f, _, kh, kw = w.shape
    _, ho, wo, _ = dout.shape
    dflat = dout.reshape(-1, f)
    db = dflat.sum(axis=0)
    dx = np.zeros_like(x) if need_dx else None
    if cols is not None:
        dw = (cols.T @ dflat).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        if need_dx:
            wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
            dcols = (dflat @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            for i in range(kh):
                for j in range(kw):
                    dx[_window_slices(i, j, stride, ho, wo)] += dcols[:, :, :, i, j, :]
    else:
        dw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = _window_slices(i, j, stride, ho, wo)
                dw[:, :, i, j] = dflat.T @ x[sl].reshape(-1, c)
                if need_dx:
                    dx[sl] += dout @ w[:, :, i, j]
    return dx, np.ascontiguousarray(dw), db


def _pool_windows(x, kh, kw):
    n, h, w, c = x.shape
    ho, wo = h // kh, w // kw
    xr = x[:, : ho * kh, : wo * kw].reshape(n, ho, kh, wo, kw, c)
    return xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, kh * kw)


def maxpool_forward(x, kernel):
    win = _pool_windows(x, *kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, x, kernel, idx):
    kh, kw = kernel
    n, ho, wo, c = dout.shape
    dwin = np.zeros((n, ho, wo, c, kh * kw), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    block = dwin.reshape(n, ho, wo, c, kh, kw).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros_like(x)
    dx[:, : ho * kh, : wo * kw] = block.reshape(n, ho * kh, wo * kw, c)
    return dx


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- network


def forward(m: ModelParams, x, train_mode: bool = False, rng: np.random.Generator | None = None,
            return_cache: bool = False, stop_before_softmax: bool = False):
    """Propagate an (N, H, W, C) batch; returns (N, H', W', classes)."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != m.spec.channels:
        raise ShapeMismatch(f"expected (N, H, W, {m.spec.channels}) input, got {x.shape}")
    x = x.astype(m.dtype, copy=False)
    if train_mode and rng is None:
        raise ValueError("train_mode forward needs an rng for dropout")
    cache = []
    for li, ls in enumerate(m.spec.layers):
        aux = None
        inp = x
        if ls.kind == "conv":
            x, aux = conv_forward(x, m.weights[li], m.biases[li], ls.stride)
        elif ls.kind == "maxpool":
            x, aux = maxpool_forward(x, ls.kernel)
        elif ls.kind == "dense":
            n = x.shape[0]
            flat = x.reshape(n, -1)
            if flat.shape[1] != m.weights[li].shape[1]:
                raise ShapeMismatch(
                    f"dense layer expects {m.weights[li].shape[1]} inputs, got {flat.shape[1]}")
            x = (flat @ m.weights[li].T + m.biases[li]).reshape(n, 1, 1, -1)
        elif ls.kind == "dropout":
            if train_mode and ls.rate > 0:
                aux = (rng.random(x.shape) >= ls.rate).astype(x.dtype) / (1.0 - ls.rate)
                x = x * aux
        elif ls.kind == "leaky_relu":
            x = np.where(x > 0, x, x * LEAKY_SLOPE)
        elif ls.kind == "relu":
            x = np.maximum(x, 0)
        elif ls.kind == "softmax":
            if stop_before_softmax:
                cache.append((inp, None))
                break
            x = softmax(x)
        cache.append((inp, aux))
    if return_cache:
        return x, cache
    return x


def backward(m: ModelParams, cache, dout, skip_last: int = 0):
    """Gradients for every parameter given d(loss)/d(output).

    ``skip_last`` layers at the end of the stack are treated as already
    differentiated (used for the fused softmax + cross-entropy path).
    """
    gw = [None] * len(m.spec.layers)
    gb = [None] * len(m.spec.layers)
    layers = m.spec.layers
    top = len(cache) - skip_last
    out_cache = None
    for li in range(top - 1, -1, -1):
        ls = layers[li]
        inp, aux = cache[li]
        need_dx = li > 0
        if ls.kind == "conv":
            dout, gw[li], gb[li] = conv_backward(dout, inp, m.weights[li], ls.stride, aux, need_dx)
        elif ls.kind == "maxpool":
            dout = maxpool_backward(dout, inp, ls.kernel, aux)
        elif ls.kind == "dense":
            n = inp.shape[0]
            flat = inp.reshape(n, -1)
            d2 = dout.reshape(n, -1)
            gw[li] = d2.T @ flat
            gb[li] = d2.sum(axis=0)
            dout = (d2 @ m.weights[li]).reshape(inp.shape)
        elif ls.kind == "dropout":
            if aux is not None:
                dout = dout * aux
        elif ls.kind == "leaky_relu":
            dout = np.where(inp > 0, dout, dout * LEAKY_SLOPE)
        elif ls.kind == "relu":
            dout = np.where(inp > 0, dout, 0)
        elif ls.kind == "softmax":
            p = softmax(inp)
            dout = p * (dout - (dout * p).sum(axis=-1, keepdims=True))
        out_cache = dout
    return gw, gb, out_cache


def cross_entropy(logits, targets):
    """Mean over samples/positions of -sum(q log p); targets broadcast to logits."""
    lp = log_softmax(logits)
    return float(-(targets * lp).sum(axis=-1).mean())


def loss_and_grads(m: ModelParams, x, targets, l2: float = 0.0, rng=None, train_mode=True):
    """Cross-entropy (+ l2 * sum of squared weights) and its parameter gradients.

    ``targets`` has shape (N, classes) for a 1x1 output grid or matches the
    output grid exactly.
    """
    if m.spec.layers[-1].kind != "softmax":
        raise ShapeMismatch("loss requires a softmax head")
    logits, cache = forward(m, x, train_mode=train_mode, rng=rng, return_cache=True,
                            stop_before_softmax=True)
    q = np.asarray(targets, dtype=logits.dtype)
    if q.ndim == 2:
        q = q[:, None, None, :]
    q = np.broadcast_to(q, logits.shape)
    loss = cross_entropy(logits, q)
    positions = math.prod(logits.shape[:3])
    dlogits = (softmax(logits) - q) / positions
    gw, gb, _ = backward(m, cache, dlogits, skip_last=1)
    if l2:
        for li, wt in enumerate(m.weights):
            if wt is not None:
                loss += l2 * float((wt.astype(np.float64) ** 2).sum())
                gw[li] = gw[li] + 2.0 * l2 * wt
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    return loss, gw, gb


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 3e-5
    epochs: int = 20
    l2: float = 1e-5
    batch: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    steps_per_epoch: int | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.batch < 2 or self.batch % 2:
            raise ValueError("batch must be even")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.epochs == 1 or epoch == 0:
            return self.lr_start
        if epoch == self.epochs - 1:
            return self.lr_end
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / (self.epochs - 1))


class Adam:
    def __init__(self, m: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        zeros = lambda ts: [None if a is None else np.zeros_like(a) for a in ts]
        self.mw, self.vw = zeros(m.weights), zeros(m.weights)
        self.mb, self.vb = zeros(m.biases), zeros(m.biases)

    def step(self, m: ModelParams, gw, gb, lr: float):
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for params, grads, ms, vs in ((m.weights, gw, self.mw, self.vw), (m.biases, gb, self.mb, self.vb)):
            for i, g in enumerate(grads):
                if g is None:
                    continue
                ms[i] *= c.beta1
                ms[i] += (1 - c.beta1) * g
                vs[i] *= c.beta2
                vs[i] += (1 - c.beta2) * g * g
                step = lr * (ms[i] / corr1) / (np.sqrt(vs[i] / corr2) + c.adam_eps)
                params[i] -= step.astype(params[i].dtype, copy=False)


@dataclass
class PatchDataset:
    """Patches (N, S, S, 3) with hard labels (1 = mitosis) and optional soft targets.

    Soft targets are (p_background, p_mitosis) pairs; the class index of
    mitosis is 1 throughout the package.
    """

    patches: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.patches) != len(self.labels):
            raise ShapeMismatch("patches and labels differ in length")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (len(self.labels), 2):
                raise ShapeMismatch("targets must be (N, 2)")

    def __len__(self):
        return len(self.labels)

    def hard_targets(self, idx):
        t = np.zeros((len(idx), 2))
        t[np.arange(len(idx)), self.labels[idx]] = 1.0
        return t

    def targets_for(self, idx):
        return self.targets[idx] if self.targets is not None else self.hard_targets(idx)


def prepare_input(patches) -> np.ndarray:
    """Reflectance patches -> centered float32 network input."""
    a = np.asarray(patches)
    if a.dtype == np.uint8:
        a = a.astype(np.float32) / 255.0
    return (a.astype(np.float32, copy=False) - 0.5)


def center_crop(patches, size: int):
    s = patches.shape[-2]
    o = (s - size) // 2
    return patches[..., o : o + size, o : o + size, :]


def predict_proba(m, patches, batch: int = 256) -> np.ndarray:
    """Mitosis probability for each patch, center-cropped to the model's input size."""
    from .mining import model_forward

    size = _input_size(m)
    out = []
    for i in range(0, len(patches), batch):
        x = prepare_input(center_crop(np.asarray(patches[i : i + batch]), size))
        out.append(model_forward(m, x)[:, 0, 0, 1].astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def _input_size(m) -> int:
    spec = getattr(m, "spec", None)
    if spec is None:
        spec = m.members[0].spec
    return spec.input_size


def f1_at(probs, labels, threshold: float = 0.5) -> float:
    pred = np.asarray(probs) >= threshold
    lab = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def _balanced_batches(labels, batch, steps, rng):
    """Index batches with batch/2 samples from each class, cycling through shuffles."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    half = batch // 2
    queues = {}

    def take(pool, key):
        q = queues.get(key, np.zeros(0, dtype=np.int64))
        while len(q) < half:
            q = np.concatenate([q, rng.permutation(pool)])
        queues[key] = q[half:]
        return q[:half]

    for _ in range(steps):
        yield np.concatenate([take(pos, 1), take(neg, 0)])


def train(train_set: PatchDataset, val_set: PatchDataset, spec: NetworkSpec, cfg: TrainConfig,
          augment_cfg=None, init: ModelParams | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None,
          val_fn: Callable[[ModelParams], float] | None = None) -> ModelParams:
    """Adam training with balanced batches; returns the best-validation-F1 checkpoint.

    ``val_fn`` replaces the patch-level F1 as the checkpoint score when given.
    """
    from .augment import AugmentConfig, augment_patch

    if len(val_set) == 0 or len(np.unique(val_set.labels)) < 2:
        raise ValueError("validation set must contain both classes")
    if len(np.unique(train_set.labels)) < 2:
        raise ValueError("training set must contain both classes")
    augment_cfg = augment_cfg or AugmentConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, batch_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    m = init.copy() if init is not None else init_params(spec, init_rng)
    opt = Adam(m, cfg)
    n_major = max(np.sum(train_set.labels == 1), np.sum(train_set.labels == 0))
    steps = cfg.steps_per_epoch or math.ceil(n_major / (cfg.batch // 2))
    best = None
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for idx in _balanced_batches(train_set.labels, cfg.batch, steps, batch_rng):
            raw = train_set.patches[idx]
            if raw.shape[1] == augment_cfg.input_size:
                batch = np.stack([augment_patch(p, augment_cfg, aug_rng) for p in raw])
            else:
                batch = center_crop(raw, spec.input_size)
            x = prepare_input(batch)
            loss, gw, gb = loss_and_grads(m, x, train_set.targets_for(idx), cfg.l2, aug_rng)
            opt.step(m, gw, gb, lr)
            losses.append(loss)
        if val_fn is None:
            f1 = f1_at(predict_proba(m, val_set.patches), val_set.labels, cfg.threshold)
        else:
            f1 = float(val_fn(m))
        log.info("epoch %d lr %.2e loss %.4f val_f1 %.4f", epoch, lr, np.mean(losses), f1)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)), f1)
        if best is None or f1 > best.val_f1:
            best = m.copy()
            best.epoch = epoch
            best.val_f1 = f1
    return best
