"""Per-cell fusion of matching scores with a rendered geometry hint.

Every cost-volume cell ``(d, y, x)`` is described by three numbers: the
matching score, the absolute difference between the rendered hint depth at
``(y, x)`` and the plane depth ``d`` (``-1`` when no hint was rendered), and the
hint confidence (``0`` when missing). A combiner maps that triple to a fused
score; either the closed-form :func:`combine_analytic` or a small MLP.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cost_volume import CostVolume, DepthPlanes
from .render import HintImages

logger = logging.getLogger(__name__)

MISSING_DELTA = -1.0


class HintMode(enum.Enum):
    NO_HINT = "NoHint"
    FULL_TSDF = "FullTsdf"
    PARTIAL_TSDF = "PartialTsdf"


HINT_MODE_PROBABILITIES = {HintMode.NO_HINT: 0.5, HintMode.FULL_TSDF: 0.25, HintMode.PARTIAL_TSDF: 0.25}


def sample_hint_mode(rng: np.random.Generator) -> HintMode:
    """Half the items get no hint; the rest split evenly between full and partial TSDF hints."""
    u = rng.random()
    if u < 0.5:
        return HintMode.NO_HINT
    if u < 0.75:
        return HintMode.FULL_TSDF
    return HintMode.PARTIAL_TSDF


# --------------------------------------------------------------------------- features


def hint_feature(plane_depth, hint: HintImages, pixel=None):
    """``(hint_delta, confidence)`` for one pixel, or for whole images when ``pixel`` is None.

    Broadcasts ``plane_depth`` against the hint images, so passing a (D, 1, 1)
    array of plane depths yields (D, H, W) features.
    """
    plane_depth = np.asarray(plane_depth, dtype=np.float64)
    if np.any(plane_depth <= 0):
        raise ValueError("plane depth must be positive")
    depth = hint.depth.values
    conf = hint.confidence.values
    if pixel is not None:
        x, y = pixel
        depth = depth[y, x]
        conf = conf[y, x]
    valid = depth > 0
    delta = np.where(valid, np.abs(depth - plane_depth), MISSING_DELTA)
    confidence = np.broadcast_to(np.where(valid, conf, 0.0), delta.shape)
    if delta.ndim == 0:
        return float(delta), float(confidence)
    return delta, np.array(confidence)


def volume_features(cv: CostVolume, hint: HintImages, planes: DepthPlanes):
    """Stacked (D, H, W, 3) features for every cell of ``cv``."""
    D, H, W = cv.shape
    if hint.depth.values.shape != (H, W):
        raise ValueError(
            f"hint is {hint.depth.width}x{hint.depth.height} but cost volume is {W}x{H}"
        )
    delta, conf = hint_feature(planes.values[:, None, None], hint)
    return np.stack([cv.scores, delta, conf], axis=-1)


def combine_analytic(matching_score, hint_delta, confidence, alpha: float = 1.0, sigma=1.0):
    """``score + alpha * confidence * exp(-delta^2 / (2 sigma^2))``.

    The hint term is exactly zero wherever ``confidence`` is zero.
    """
    s = np.asarray(matching_score, dtype=np.float64)
    c = np.asarray(confidence, dtype=np.float64)
    d = np.asarray(hint_delta, dtype=np.float64)
    bump = np.exp(-(d * d) / (2.0 * np.asarray(sigma, dtype=np.float64) ** 2))
    out = np.where(c != 0.0, s + alpha * c * bump, s)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AnalyticCombiner:
    alpha: float = 1.0

    def fuse(self, cv: CostVolume, feats: np.ndarray, planes: DepthPlanes) -> np.ndarray:
        sigma = planes.spacing()[:, None, None]
        return combine_analytic(feats[..., 0], feats[..., 1], feats[..., 2], self.alpha, sigma)


# --------------------------------------------------------------------------- MLP


@dataclass
class HintMlp:
    """Fully connected ReLU network; ``weights[l]`` has shape (in, out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        if self.weights[0].shape[0] != 3:
            raise ValueError("hint MLP input dimension must be 3")
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise ValueError("weight/bias shape mismatch")
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise ValueError("MLP parameters must be finite")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @classmethod
    def zeros(cls, sizes: Sequence[int] = (3, 32, 32, 1)) -> "HintMlp":
        return cls(
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @classmethod
    def initialize(cls, seed: int = 0, sizes: Sequence[int] = (3, 32, 32, 1), passthrough: bool = True) -> "HintMlp":
        """He-initialized network.

        With ``passthrough`` the first hidden unit of each layer is rewired so the
        network starts out returning the matching score unchanged (scores lie in
        [-1, 1], so ``relu(s + 1) - 1 == s``); training then only has to learn
        how to use the hint.
        """
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            biases.append(np.zeros(b))
        if passthrough:
            weights[0][:, 0] = 0.0
            weights[0][0, 0] = 1.0
            biases[0][0] = 1.0
            for W, b in zip(weights[1:-1], biases[1:-1]):
                W[:, 0] = 0.0
                W[0, 0] = 1.0
                b[0] = 0.0
            weights[-1][:, :] = 0.0
            weights[-1][0, :] = 1.0
            biases[-1][:] = -1.0
        return cls(weights, biases)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "HintMlp":
        return HintMlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Batched forward pass over rows of ``x`` (..., 3) -> (...)."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])
        acts = [h]
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < n - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = h[:, 0].reshape(lead)
        return (out, acts) if keep else out

    __call__ = forward

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given d(loss)/d(output) per row; same order as ``parameters()``."""
        g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            grads = [a_in.T @ g, g.sum(axis=0)] + grads
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return grads

    def fuse(self, cv: CostVolume, feats: np.ndarray, planes: DepthPlanes) -> np.ndarray:
        return self.forward(feats)

    # ------------------------------------------------------------------ file format

    _MAGIC = b"DTMLP"
    _VERSION = 1

    def to_bytes(self) -> bytes:
        sizes = self.layer_sizes
        out = [self._MAGIC, struct.pack("<II", self._VERSION, len(sizes)), struct.pack(f"<{len(sizes)}I", *sizes)]
        for W, b in zip(self.weights, self.biases):
            out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HintMlp":
        if data[:5] != cls._MAGIC:
            raise ValueError("not a DTMLP parameter file")
        version, n = struct.unpack_from("<II", data, 5)
        if version != cls._VERSION:
            raise ValueError(f"unsupported DTMLP version {version}")
        sizes = struct.unpack_from(f"<{n}I", data, 13)
        off = 13 + 4 * n
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            if off + 8 * (a * b + b) > len(data):
                raise ValueError("truncated DTMLP file")
            weights.append(np.frombuffer(data, "<f8", a * b, off).reshape(a, b).copy())
            off += 8 * a * b
            biases.append(np.frombuffer(data, "<f8", b, off).copy())
            off += 8 * b
        if off != len(data):
            raise ValueError("trailing bytes in DTMLP file")
        return cls(weights, biases)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HintMlp":
        return cls.from_bytes(Path(path).read_bytes())


def combine_mlp(mlp: HintMlp, matching_score, hint_delta, confidence):
    x = np.stack(np.broadcast_arrays(
        np.asarray(matching_score, float), np.asarray(hint_delta, float), np.asarray(confidence, float)
    ), axis=-1)
    out = mlp.forward(x)
    return out if out.ndim else float(out)


def mlp_gradients(mlp: HintMlp, features: np.ndarray, targets: np.ndarray, loss: str = "mse"):
    """Loss value and exact parameter gradients of the mean loss over the batch.

    ``mse`` is ``mean((f(x) - t)^2)``; ``l1`` is ``mean(|f(x) - t|)``.
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(features) == 0:
        raise ValueError("batch must not be empty")
    pred, acts = mlp.forward(features, keep=True)
    err = pred - targets
    if loss == "mse":
        value = float(np.mean(err**2))
        upstream = 2.0 * err / len(err)
    elif loss == "l1":
        value = float(np.mean(np.abs(err)))
        upstream = np.sign(err) / len(err)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, mlp.backward(acts, upstream)


# --------------------------------------------------------------------------- volume fusion


def fuse_volume(cv: CostVolume, hint: HintImages, planes: DepthPlanes, combiner=None, no_confidence: bool = False) -> CostVolume:
    """Replace every cell's score by ``combiner`` applied to its (score, delta, confidence) triple.

    ``no_confidence`` zeroes the confidence input before the combiner.
    """
    combiner = combiner if combiner is not None else AnalyticCombiner()
    feats = volume_features(cv, hint, planes)
    if no_confidence:
        feats[..., 2] = 0.0
    fused = combiner.fuse(cv, feats, planes)
    # cells without any in-bounds source keep the zero score contract
    fused = np.where(cv.valid_count > 0, fused, 0.0)
    return cv.with_scores(fused)


# --------------------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite_loss: Optional[float]):
        super().__init__(f"training diverged at step {step}; last finite loss {last_finite_loss}")
        self.step = step
        self.last_finite_loss = last_finite_loss


@dataclass
class TrainingItem:
    """One frame's matching-only cost volume, its GT depth, and candidate hints."""

    cost_volume: CostVolume
    gt_depth: np.ndarray  # (H, W) at cost-volume resolution, <= 0 invalid
    hints: dict  # HintMode -> HintImages


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_items: int = 4
    pixels_per_item: int = 256
    learning_rate: float = 1e-3
    temperature: float = 10.0
    validation_fraction: float = 0.25
    seed: int = 0
    forced_mode: Optional[HintMode] = None


@dataclass
class TrainResult:
    mlp: HintMlp
    train_loss: list[float] = field(default_factory=list)
    validation_loss: list[float] = field(default_factory=list)


def _item_columns(item: TrainingItem, mode: HintMode, planes: DepthPlanes, rng, n_pixels: Optional[int]):
    D, H, W = item.cost_volume.shape
    hint = item.hints.get(mode) if mode is not HintMode.NO_HINT else None
    if hint is None:
        hint = HintImages.missing(W, H)
    feats = volume_features(item.cost_volume, hint, planes)  # (D, H, W, 3)
    ok = (item.gt_depth > 0) & (item.cost_volume.valid_count > 0).any(axis=0)
    ys, xs = np.nonzero(ok)
    if n_pixels is not None and len(ys) > n_pixels:
        pick = rng.choice(len(ys), n_pixels, replace=False)
        ys, xs = ys[pick], xs[pick]
    cols = np.moveaxis(feats[:, ys, xs], 0, 1)  # (P, D, 3)
    valid = np.moveaxis(item.cost_volume.valid_count[:, ys, xs] > 0, 0, 1)
    return cols, valid, item.gt_depth[ys, xs]


def softargmax_log_loss(mlp: HintMlp, cols, valid, gt, planes: DepthPlanes, temperature: float, grad: bool = True):
    """Mean ``|log d_hat - log d_gt|`` of the soft-argmax depth of MLP-fused columns."""
    P, D, _ = cols.shape
    out, acts = mlp.forward(cols.reshape(-1, 3), keep=True)
    s = out.reshape(P, D)
    logits = np.where(valid, temperature * s, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(logits), 0.0)
    p = e / e.sum(axis=1, keepdims=True)
    inv = 1.0 / planes.values
    inv_hat = p @ inv
    r = -np.log(inv_hat) - np.log(gt)
    loss = float(np.mean(np.abs(r)))
    if not grad:
        return loss, None
    dl_dinv = -np.sign(r) / inv_hat / P
    ds = temperature * p * (inv[None, :] - inv_hat[:, None]) * dl_dinv[:, None]
    return loss, mlp.backward(acts, ds.reshape(-1))


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_hint_mlp(
    items: Sequence[TrainingItem],
    planes: DepthPlanes,
    config: TrainConfig = TrainConfig(),
    init: Optional[HintMlp] = None,
    log: Optional[Callable[[int, float, Optional[float]], None]] = None,
) -> TrainResult:
    """Minibatch Adam on the soft-argmax log-depth L1 loss with randomly sampled hint modes.

    The last ``validation_fraction`` of ``items`` is held out; validation loss
    is evaluated with hints sampled by a separate fixed-seed generator.
    """
    if not items:
        raise ValueError("no training items")
    rng = np.random.default_rng(config.seed)
    mlp = init.copy() if init is not None else HintMlp.initialize(config.seed)
    n_val = int(round(len(items) * config.validation_fraction)) if len(items) > 1 else 0
    train_items = list(items[: len(items) - n_val])
    val_items = list(items[len(items) - n_val:])
    opt = Adam(mlp.parameters(), config.learning_rate)
    result = TrainResult(mlp)
    last_finite = None

    def pick_mode(r):
        return config.forced_mode if config.forced_mode is not None else sample_hint_mode(r)

    for step in range(config.steps):
        batch = rng.choice(len(train_items), size=min(config.batch_items, len(train_items)), replace=False)
        cols, valid, gt = [], [], []
        for i in batch:
            c, v, g = _item_columns(train_items[i], pick_mode(rng), planes, rng, config.pixels_per_item)
            cols.append(c)
            valid.append(v)
            gt.append(g)
        cols, valid, gt = np.concatenate(cols), np.concatenate(valid), np.concatenate(gt)
        if len(gt) == 0:
            continue
        loss, grads = softargmax_log_loss(mlp, cols, valid, gt, planes, config.temperature)
        if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(step, last_finite)
        last_finite = loss
        opt.step(grads)
        result.train_loss.append(loss)
        val_loss = None
        if val_items:
            vrng = np.random.default_rng(config.seed + 1)
            vals = []
            for it in val_items:
                c, v, g = _item_columns(it, pick_mode(vrng), planes, vrng, config.pixels_per_item)
                if len(g):
                    vals.append(softargmax_log_loss(mlp, c, v, g, planes, config.temperature, grad=False)[0])
            val_loss = float(np.mean(vals)) if vals else None
            result.validation_loss.append(val_loss)
        if log is not None:
            log(step, loss, val_loss)
        logger.debug("step %d loss %.5f val %s", step, loss, val_loss)
    return result
