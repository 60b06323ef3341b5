"""Prefill-only decoder transformer with attention-map capture and reuse.

Every block is pre-norm: RMSNorm, multi-head causal self-attention with
rotary positions, residual add, RMSNorm, SiLU feed-forward, residual add.
The embedding step (`encode`) applies layer 0's pre-attention norm, so layer
0 consumes its input directly and the remaining layers normalize their own.

All forward variants go through `forward_layers`, which asks a per-layer
*map policy* whether a ready-made attention map is available.  When it is,
the Q/K projections, the rotary rotation and the score softmax are never run.
"""

from __future__ import annotations

import struct
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FormatError
from .tensor import F32, ShapeError, matmul, rms_norm, rotary_embed, softmax_rows

WEIGHT_MAGIC = b"ACWT"
WEIGHT_VERSION = 1

# Stage names, in the order of a per-layer time breakdown.
Q_PROJ = "q_proj"
K_PROJ = "k_proj"
ROTARY = "rotary"
V_PROJ = "v_proj"
ATTN_MAP = "attn_map"  # QK^T, scaling and softmax
ATTN_V = "attn_v"
O_PROJ = "o_proj"
NORM = "norm"
FFN = "ffn"
EMBED = "embed"

ATTENTION_STAGES = (Q_PROJ, K_PROJ, ROTARY, V_PROJ, ATTN_MAP, ATTN_V, O_PROJ, NORM)
SKIPPED_ON_REUSE = (Q_PROJ, K_PROJ, ROTARY, ATTN_MAP)


class InputError(ValueError):
    """Bad token sequence handed to the model."""


class CacheError(ValueError):
    """Attention cache does not fit the current input."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 128
    head_dim: int = 32
    ffn_dim: int = 512
    vocab_size: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ValueError("hidden_dim must equal num_heads * head_dim")

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]

    def __post_init__(self):
        c = self.config
        d, f = c.hidden_dim, c.ffn_dim
        if self.embedding.shape != (c.vocab_size, d):
            raise ShapeError(f"embedding shape {self.embedding.shape} != {(c.vocab_size, d)}")
        if len(self.layers) != c.num_layers:
            raise ShapeError(f"expected {c.num_layers} layers, got {len(self.layers)}")
        want = [(d, d)] * 4 + [(d,), (d,), (d, f), (f, d)]
        for i, layer in enumerate(self.layers):
            for t, shape in zip(layer.tensors(), want):
                if t.shape != shape:
                    raise ShapeError(f"layer {i}: tensor shape {t.shape} != {shape}")

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        """Seeded random weights; matrices scaled by 1/sqrt(fan_in), norm gains at 1."""
        rng = np.random.default_rng(seed)
        d, f = config.hidden_dim, config.ffn_dim

        def mat(rows, cols):
            return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(F32)

        layers = [
            LayerWeights(
                wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d),
                attn_norm=np.ones(d, F32), ffn_norm=np.ones(d, F32),
                w_in=mat(d, f), w_out=mat(f, d),
            )
            for _ in range(config.num_layers)
        ]
        emb = rng.standard_normal((config.vocab_size, d)).astype(F32)
        return cls(config, emb, layers)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(WEIGHT_MAGIC)
            fh.write(struct.pack("<I", WEIGHT_VERSION))
            fh.write(struct.pack("<7I", *self.config.as_tuple()))
            fh.write(self.embedding.astype("<f4").tobytes())
            for layer in self.layers:
                for t in layer.tensors():
                    fh.write(t.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        raw = Path(path).read_bytes()
        if len(raw) < 36 or raw[:4] != WEIGHT_MAGIC:
            raise FormatError(f"{path}: not a weight file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != WEIGHT_VERSION:
            raise FormatError(f"{path}: unsupported weight version {version}")
        config = ModelConfig(*struct.unpack_from("<7I", raw, 8))
        d, f = config.hidden_dim, config.ffn_dim
        pos = 36

        def take(*shape):
            nonlocal pos
            n = int(np.prod(shape))
            if pos + 4 * n > len(raw):
                raise FormatError(f"{path}: truncated weight file")
            arr = np.frombuffer(raw, "<f4", n, pos).astype(F32).reshape(shape)
            pos += 4 * n
            return arr

        emb = take(config.vocab_size, d)
        layers = [
            LayerWeights(take(d, d), take(d, d), take(d, d), take(d, d),
                         take(d), take(d), take(d, f), take(f, d))
            for _ in range(config.num_layers)
        ]
        if pos != len(raw):
            raise FormatError(f"{path}: trailing bytes in weight file")
        return cls(config, emb, layers)


@dataclass
class InputEmbedding:
    """Normalized token embeddings of one sentence, ``(seq_len, hidden_dim)``."""

    matrix: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.matrix.shape[0]


@dataclass
class AttentionRecord:
    """Post-softmax attention maps of one sentence, ``(layers, heads, L, L)``."""

    maps: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.maps.shape[-1]

    @property
    def num_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def num_heads(self) -> int:
        return self.maps.shape[1]


@dataclass
class AttnCache:
    """Retrieved maps for every layer; ``maps[l]`` is ``(heads, L, L)``."""

    record_id: int
    maps: Sequence[np.ndarray]

    @property
    def seq_len(self) -> int:
        return self.maps[0].shape[-1]


class Profiler:
    """Accumulates FLOPs and wall time per stage, plus FLOPs per (layer, stage)."""

    def __init__(self):
        self.flops: dict[str, int] = defaultdict(int)
        self.seconds: dict[str, float] = defaultdict(float)
        self.layer_flops: dict[tuple[int, str], int] = defaultdict(int)
        self.layer = -1

    @contextmanager
    def stage(self, name: str, flops: int = 0):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0
            self.flops[name] += flops
            self.layer_flops[(self.layer, name)] += flops

    def add_time(self, name: str, seconds: float) -> None:
        self.seconds[name] += seconds

    def total_flops(self, stages: Sequence[str] | None = None) -> int:
        if stages is None:
            return sum(self.flops.values())
        return sum(self.flops.get(s, 0) for s in stages)

    def stage_seconds(self, stages: Sequence[str]) -> float:
        return sum(self.seconds.get(s, 0.0) for s in stages)


# policy(layer_index, normalized_layer_input, maps_used_so_far) -> (heads, L, L) map or None
MapPolicy = Callable[[int, np.ndarray, list], Optional[np.ndarray]]


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Byte-level tokenizer: every UTF-8 byte becomes ``byte % vocab_size``."""
    return [b % vocab_size for b in text.encode("utf-8")]


def encode(ids: Sequence[int], weights: ModelWeights, profiler: Profiler | None = None) -> InputEmbedding:
    """Embedding lookup followed by layer 0's pre-attention RMSNorm."""
    c = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a non-empty 1-D sequence")
    if ids.size > c.max_seq_len:
        raise InputError(f"sequence length {ids.size} exceeds max_seq_len {c.max_seq_len}")
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        raise InputError(f"token ids must lie in [0, {c.vocab_size})")
    prof = profiler or Profiler()
    prof.layer = -1
    with prof.stage(EMBED, 3 * ids.size * c.hidden_dim):
        rows = weights.embedding[ids]
        return InputEmbedding(rms_norm(rows, weights.layers[0].attn_norm))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    seq, d = x.shape
    return x.reshape(seq, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, seq, dk = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(seq, heads * dk)


def compute_attention_map(x: np.ndarray, layer: LayerWeights, config: ModelConfig,
                          prof: Profiler) -> np.ndarray:
    """Q/K projections, rotary rotation and causal softmax for one layer."""
    seq, d = x.shape
    h, dk = config.num_heads, config.head_dim
    with prof.stage(Q_PROJ, 2 * seq * d * d):
        q = _split_heads(matmul(x, layer.wq), h)
    with prof.stage(K_PROJ, 2 * seq * d * d):
        k = _split_heads(matmul(x, layer.wk), h)
    with prof.stage(ROTARY, 6 * seq * d):
        q, k = rotary_embed(q, k, np.arange(seq))
    with prof.stage(ATTN_MAP, 2 * h * seq * seq * dk + 6 * h * seq * seq):
        scores = matmul(q, k.transpose(0, 2, 1)) * F32(1.0 / np.sqrt(dk))
        return softmax_rows(scores, causal_mask=True)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x.astype(np.float64))).astype(F32)


def forward_layers(h: InputEmbedding, weights: ModelWeights, policy: MapPolicy | None = None,
                   profiler: Profiler | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run every block; return final hidden states and the map used at each layer."""
    c = weights.config
    prof = profiler or Profiler()
    seq, d = h.matrix.shape
    if d != c.hidden_dim:
        raise ShapeError(f"input width {d} != hidden_dim {c.hidden_dim}")
    heads, dk = c.num_heads, c.head_dim
    hid = h.matrix
    used: list[np.ndarray] = []
    for li, layer in enumerate(weights.layers):
        prof.layer = li
        if li == 0:
            x = hid
        else:
            with prof.stage(NORM, 4 * seq * d):
                x = rms_norm(hid, layer.attn_norm)
        with prof.stage(V_PROJ, 2 * seq * d * d):
            v = _split_heads(matmul(x, layer.wv), heads)
        amap = policy(li, x, used) if policy is not None else None
        if amap is None:
            amap = compute_attention_map(x, layer, c, prof)
        elif amap.shape != (heads, seq, seq):
            raise CacheError(f"layer {li}: map shape {amap.shape} does not fit input ({heads}, {seq}, {seq})")
        used.append(amap)
        with prof.stage(ATTN_V, 2 * heads * seq * seq * dk):
            ctx = _merge_heads(matmul(amap, v))
        with prof.stage(O_PROJ, 2 * seq * d * d):
            hid = hid + matmul(ctx, layer.wo)
        with prof.stage(FFN, 4 * seq * d * c.ffn_dim + 4 * seq * c.ffn_dim + 4 * seq * d):
            f = rms_norm(hid, layer.ffn_norm)
            hid = hid + matmul(_silu(matmul(f, layer.w_in)), layer.w_out)
    prof.layer = -1
    return hid, used


def forward_capture(h: InputEmbedding, weights: ModelWeights,
                    profiler: Profiler | None = None) -> tuple[np.ndarray, AttentionRecord]:
    """Full prefill pass; also returns every layer's attention maps."""
    hid, used = forward_layers(h, weights, None, profiler)
    return hid, AttentionRecord(np.stack(used))


def forward_with_cache(attn_cache: AttnCache | None, h: InputEmbedding, weights: ModelWeights,
                       profiler: Profiler | None = None) -> np.ndarray:
    """Prefill pass that substitutes cached maps for every layer when a cache is given."""
    if attn_cache is None:
        return forward_layers(h, weights, None, profiler)[0]
    if len(attn_cache.maps) != weights.config.num_layers:
        raise CacheError(f"cache holds {len(attn_cache.maps)} layers, model has {weights.config.num_layers}")
    if attn_cache.seq_len != h.seq_len:
        raise CacheError(f"cache length {attn_cache.seq_len} != input length {h.seq_len}")
    maps = attn_cache.maps
    return forward_layers(h, weights, lambda li, x, used: maps[li], profiler)[0]


def sentence_embedding(hidden: np.ndarray) -> np.ndarray:
    """Last-token hidden state."""
    return np.array(hidden[-1], dtype=F32)
