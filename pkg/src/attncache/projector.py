"""Feature projector: a two-layer MLP trained as a weight-shared Siamese pair.

The projector maps a pooled input embedding to a short feature vector whose
Euclidean distances track how different two sentences' attention maps are.
Training targets come from `attention_label`; the loss is Smooth L1.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .model import AttentionRecord, InputEmbedding
from .tensor import F32, ShapeError, matmul

log = logging.getLogger(__name__)

PROJ_MAGIC = b"ACFP"
PROJ_VERSION = 1
FEATURE_DIM = 128
PROJ_HIDDEN = 256


class TrainingError(RuntimeError):
    pass


@dataclass
class FeatureProjector:
    w1: np.ndarray  # (in_dim, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, feature_dim)
    b2: np.ndarray
    train_loss: float | None = None

    def __post_init__(self):
        in_dim, hidden = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape[0] != hidden or self.b2.shape != (self.w2.shape[1],):
            raise ShapeError("inconsistent projector weight shapes")
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=F32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"projector weight {name} is not finite")
            setattr(self, name, arr)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: int = PROJ_HIDDEN, feature_dim: int = FEATURE_DIM,
             seed: int = 0) -> "FeatureProjector":
        params = init_params(in_dim, hidden, feature_dim, np.random.default_rng(seed))
        return cls.from_params(params)

    @classmethod
    def from_params(cls, params: dict, train_loss: float | None = None) -> "FeatureProjector":
        return cls(params["w1"], params["b1"], params["w2"], params["b2"], train_loss)

    def params(self) -> dict:
        return {k: getattr(self, k).astype(np.float64) for k in ("w1", "b1", "w2", "b2")}

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(PROJ_MAGIC)
            fh.write(struct.pack("<4I", PROJ_VERSION, self.in_dim, self.hidden, self.feature_dim))
            for t in (self.w1, self.b1, self.w2, self.b2):
                fh.write(t.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FeatureProjector":
        raw = Path(path).read_bytes()
        if len(raw) < 20 or raw[:4] != PROJ_MAGIC:
            raise FormatError(f"{path}: not a projector file")
        version, in_dim, hidden, out = struct.unpack_from("<4I", raw, 4)
        if version != PROJ_VERSION:
            raise FormatError(f"{path}: unsupported projector version {version}")
        sizes = [(in_dim, hidden), (hidden,), (hidden, out), (out,)]
        if len(raw) != 20 + 4 * sum(int(np.prod(s)) for s in sizes):
            raise FormatError(f"{path}: projector file has the wrong size")
        pos, arrs = 20, []
        for shape in sizes:
            n = int(np.prod(shape))
            arrs.append(np.frombuffer(raw, "<f4", n, pos).reshape(shape).astype(F32))
            pos += 4 * n
        return cls(*arrs)


@dataclass
class TrainingPair:
    x1: np.ndarray
    x2: np.ndarray
    y: float

    def __post_init__(self):
        if not self.y >= 0:
            raise ValueError(f"pair label must be >= 0, got {self.y}")


@dataclass
class TrainConfig:
    alpha: float = 0.2
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    hidden: int = PROJ_HIDDEN
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def pool(h: InputEmbedding | np.ndarray, max_seq_len: int) -> np.ndarray:
    """Mean over token rows plus one channel holding ``L / max_seq_len``."""
    m = h.matrix if isinstance(h, InputEmbedding) else np.asarray(h)
    seq = m.shape[0]
    if seq < 1:
        raise ShapeError("cannot pool an empty sequence")
    out = np.empty(m.shape[1] + 1, dtype=F32)
    out[:-1] = m.astype(np.float64).mean(axis=0)
    out[-1] = seq / max_seq_len
    return out


def project(pooled: np.ndarray, p: FeatureProjector) -> np.ndarray:
    x = np.asarray(pooled, dtype=F32)
    if x.shape != (p.in_dim,):
        raise ShapeError(f"pooled vector has shape {x.shape}, projector expects ({p.in_dim},)")
    hidden = np.maximum(matmul(x[None, :], p.w1)[0] + p.b1, F32(0))
    return matmul(hidden[None, :], p.w2)[0] + p.b2


def siamese_distance(x1: np.ndarray, x2: np.ndarray, p: FeatureProjector) -> float:
    diff = project(x1, p).astype(np.float64) - project(x2, p).astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def _layer_maps(rec, layer: int) -> np.ndarray:
    maps = rec.maps if isinstance(rec, AttentionRecord) else np.asarray(rec)
    return maps[layer] if maps.ndim == 4 else maps


def attention_label(a1, a2, alpha: float, layer: int = 0, include_length: bool = True) -> float:
    """Attention-map dissimilarity label for one pair of sentences.

    ``alpha / n * sum_p 0.5 * ||A1_p - A2_p||_2 + |s1 - s2|`` over the ``n``
    heads of ``layer``, each head's map flattened.  Maps of different lengths
    are compared on their common top-left block.
    """
    m1 = _layer_maps(a1, layer).astype(np.float64)
    m2 = _layer_maps(a2, layer).astype(np.float64)
    if m1.shape[0] != m2.shape[0]:
        raise ShapeError(f"head counts differ: {m1.shape[0]} vs {m2.shape[0]}")
    s1, s2 = m1.shape[-1], m2.shape[-1]
    k = min(s1, s2)
    diff = (m1[:, :k, :k] - m2[:, :k, :k]).reshape(m1.shape[0], -1)
    per_head = 0.5 * np.sqrt(np.einsum("ij,ij->i", diff, diff))
    y = alpha * per_head.sum() / m1.shape[0]
    if include_length:
        y += abs(s1 - s2)
    return float(y)


def smooth_l1(y_hat, y):
    r = np.abs(np.asarray(y_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    out = np.where(r < 1.0, 0.5 * r * r, r - 0.5)
    return float(out) if out.ndim == 0 else out


def similarity(distance) -> float:
    """Map a Euclidean distance to a similarity in (0, 1]: ``1 / (1 + d)``."""
    if np.any(np.asarray(distance) < 0):
        raise ValueError("distance must be >= 0")
    return 1.0 / (1.0 + distance)


def distance_for_similarity(theta: float) -> float:
    """Largest distance whose similarity is still >= ``theta``."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    return 1.0 / theta - 1.0


def init_params(in_dim: int, hidden: int, feature_dim: int, rng: np.random.Generator) -> dict:
    return {
        "w1": rng.standard_normal((in_dim, hidden)) * np.sqrt(2.0 / in_dim),
        "b1": np.zeros(hidden),
        "w2": rng.standard_normal((hidden, feature_dim)) / np.sqrt(hidden),
        "b2": np.zeros(feature_dim),
    }


def loss_and_grads(params: dict, x1: np.ndarray, x2: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean Smooth L1 loss of a batch and its gradient w.r.t. the shared weights.

    Both Siamese branches run through the same ``params``; their gradient
    contributions are summed into one set.  All math in float64.
    """
    w1, b1, w2, b2 = params["w1"], params["b1"], params["w2"], params["b2"]
    z1 = x1 @ w1 + b1
    z2 = x2 @ w1 + b1
    a1, a2 = np.maximum(z1, 0), np.maximum(z2, 0)
    diff = (a1 @ w2 + b2) - (a2 @ w2 + b2)
    y_hat = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    r = y_hat - y
    n = len(y)
    loss = float(np.mean(np.where(np.abs(r) < 1.0, 0.5 * r * r, np.abs(r) - 0.5)))

    dl_dyhat = np.clip(r, -1.0, 1.0) / n
    safe = np.where(y_hat > 0, y_hat, 1.0)
    g_f1 = np.where(y_hat[:, None] > 0, diff / safe[:, None], 0.0) * dl_dyhat[:, None]
    # f2 enters with the opposite sign
    g_z1 = (g_f1 @ w2.T) * (z1 > 0)
    g_z2 = (-g_f1 @ w2.T) * (z2 > 0)
    grads = {
        "w2": a1.T @ g_f1 - a2.T @ g_f1,
        "b2": np.zeros_like(b2),  # translation-invariant distance
        "w1": x1.T @ g_z1 + x2.T @ g_z2,
        "b1": g_z1.sum(axis=0) + g_z2.sum(axis=0),
    }
    return loss, grads


def train(pairs: Sequence[TrainingPair], cfg: TrainConfig,
          init: FeatureProjector | None = None) -> FeatureProjector:
    """Mini-batch SGD on the mean Smooth L1 loss; returns float32 weights."""
    if not pairs:
        raise TrainingError("need at least one training pair")
    x1 = np.stack([np.asarray(p.x1, dtype=np.float64) for p in pairs])
    x2 = np.stack([np.asarray(p.x2, dtype=np.float64) for p in pairs])
    y = np.array([p.y for p in pairs], dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        params = init.params()
    else:
        params = init_params(x1.shape[1], cfg.hidden, cfg.feature_dim, rng)

    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, x1[idx], x2[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            for k in params:
                params[k] -= cfg.lr * grads[k]
            total += loss * len(idx)
        epoch_loss = total / len(y)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    log.info("projector trained: %d pairs, %d epochs, final loss %.6f", len(y), cfg.epochs, epoch_loss)
    return FeatureProjector.from_params(params, train_loss=epoch_loss)
