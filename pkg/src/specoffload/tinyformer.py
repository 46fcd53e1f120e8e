"""Deterministic toy decoder-only transformer.

Pre-RMSNorm blocks with rotary positions, a gated-SiLU MLP and an untied output
head. All arithmetic is float64 and every reduction goes through the
fixed-order kernels in :mod:`specoffload.kernels`, so a row's output depends
only on its own inputs and the keys it attends to. That is what makes a tree
forward reproduce a sequential forward bit for bit.

Weights are read through a *provider*: any object with ``config``,
``embedding``, ``final_norm``, ``head`` and ``layer(i)``. :class:`ModelWeights`
is one; the draft view in :mod:`specoffload.placement` is another.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import kernels
from .errors import CapacityError, InvalidInputError, StructureError

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_context: int = 2048
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_context"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise InvalidInputError("hidden_dim must be divisible by num_heads")
        if (self.hidden_dim // self.num_heads) % 2:
            raise InvalidInputError("head dimension must be even for rotary embedding")
        if self.vocab_size < 2:
            raise InvalidInputError("vocab_size must be at least 2")
        if not self.rope_base > 0:
            raise InvalidInputError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass(eq=False)
class LayerWeights:
    """One decoder block. Matrices are stored (in_features, out_features)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
    NORMS = ("attn_norm", "mlp_norm")

    # Fused projections change nothing numerically: each output column is an
    # independent fixed-order reduction.
    @cached_property
    def w_qkv(self) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([self.wq, self.wk, self.wv], axis=1))

    @cached_property
    def w_gate_up(self) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([self.w_gate, self.w_up], axis=1))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.MATRICES + self.NORMS]

    def check(self, config: ModelConfig) -> None:
        h, f = config.hidden_dim, config.ffn_dim
        shapes = {
            "wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
            "w_gate": (h, f), "w_up": (h, f), "w_down": (f, h),
            "attn_norm": (h,), "mlp_norm": (h,),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} has non-finite entries")


@dataclass(eq=False)
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise InvalidInputError("number of layers does not match config")
        if self.embedding.shape != (cfg.vocab_size, cfg.hidden_dim):
            raise InvalidInputError("embedding shape does not match config")
        if self.head.shape != (cfg.hidden_dim, cfg.vocab_size):
            raise InvalidInputError("head shape does not match config")
        for layer in self.layers:
            layer.check(cfg)

    def layer(self, index: int) -> LayerWeights:
        return self.layers[index]


class WeightProvider(Protocol):
    config: ModelConfig
    embedding: np.ndarray
    final_norm: np.ndarray
    head: np.ndarray

    def layer(self, index: int) -> LayerWeights: ...


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw weights from Philox4x64-10 keyed by ``seed`` (counter starts at 0).

    Standard normals come from numpy's ``Generator.standard_normal`` and are
    scaled by ``1/sqrt(hidden_dim)``. Arrays are drawn in declaration order:
    embedding, then per layer wq, wk, wv, wo, w_gate, w_up, w_down, then the
    head. Norm gains are ones.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    h, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    scale = 1.0 / np.sqrt(h)

    def draw(*shape):
        return rng.standard_normal(shape) * scale

    embedding = draw(v, h)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                wq=draw(h, h), wk=draw(h, h), wv=draw(h, h), wo=draw(h, h),
                w_gate=draw(h, f), w_up=draw(h, f), w_down=draw(f, h),
                attn_norm=np.ones(h), mlp_norm=np.ones(h),
            )
        )
    head = draw(h, v)
    return ModelWeights(config, embedding, layers, np.ones(h), head)


def tempered_softmax(logits, temperature: float) -> np.ndarray:
    """Probabilities of ``softmax(logits / temperature)``.

    Temperature 0 gives the one-hot of the argmax, ties going to the smallest
    token id.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("logits must be a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits must be finite")
    if not temperature >= 0:
        raise InvalidInputError("temperature must be non-negative")
    if temperature == 0:
        out = np.zeros_like(x)
        out[int(np.argmax(x))] = 1.0
        return out
    z = x / temperature
    e = np.exp(z - z.max())
    return e / _seqsum(e)


def _seqsum(x: np.ndarray) -> np.ndarray:
    # Left-to-right sum over the last axis.
    return np.add.accumulate(x, axis=-1)[..., -1]


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = _seqsum(x * x) / x.shape[-1]
    return x / np.sqrt(ms + RMS_EPS)[..., None] * gain


@lru_cache(maxsize=16)
def _rope_table(head_dim: int, base: float, max_context: int):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(max_context, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, positions: np.ndarray, config: ModelConfig) -> np.ndarray:
    n = x.shape[0]
    dh = config.head_dim
    cos, sin = _rope_table(dh, float(config.rope_base), config.max_context)
    c = cos[positions][:, None, :]
    s = sin[positions][:, None, :]
    xh = x.reshape(n, config.num_heads, dh)
    x1 = xh[..., 0::2]
    x2 = xh[..., 1::2]
    out = np.empty_like(xh)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out.reshape(n, config.hidden_dim)


def _run_layers(provider, tokens, positions, cache, write_kv, mask) -> np.ndarray:
    """Shared body of both forwards; returns final hidden states (pre-norm)."""
    cfg = provider.config
    h = cfg.hidden_dim
    scale = 1.0 / np.sqrt(cfg.head_dim)
    kv_end = mask.shape[1]
    x = provider.embedding[tokens]
    for li in range(cfg.num_layers):
        lw = provider.layer(li)
        a = rms_norm(x, lw.attn_norm)
        qkv = kernels.linear(a, lw.w_qkv)
        q = apply_rope(qkv[:, :h], positions, cfg)
        k = apply_rope(qkv[:, h : 2 * h], positions, cfg)
        v = np.ascontiguousarray(qkv[:, 2 * h :])
        write_kv(li, k, v)
        keys = cache.keys[li, :kv_end]
        values = cache.values[li, :kv_end]
        s = kernels.masked_scores(q, keys, mask, cfg.num_heads, scale)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        attn = kernels.weighted_values(e, values, mask)
        x = x + kernels.linear(attn, lw.wo)
        m = rms_norm(x, lw.mlp_norm)
        gu = kernels.linear(m, lw.w_gate_up)
        g, u = gu[:, : cfg.ffn_dim], gu[:, cfg.ffn_dim :]
        x = x + kernels.linear(g / (1.0 + np.exp(-g)) * u, lw.w_down)
    return x


def _logits(provider, hidden: np.ndarray) -> np.ndarray:
    return kernels.linear(rms_norm(hidden, provider.final_norm), provider.head)


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise InvalidInputError("token id out of vocabulary range")
    return arr


def forward_sequential(provider, tokens: Sequence[int], cache, all_logits: bool = False) -> np.ndarray:
    """Causal forward of ``tokens`` after the cache's committed prefix.

    Appends the tokens' K/V to the committed region (any speculative rows are
    discarded first) and returns the last position's logits, or logits for
    every input position when ``all_logits`` is set.
    """
    cfg = provider.config
    toks = _check_tokens(tokens, cfg.vocab_size)
    n = toks.size
    if n == 0:
        raise InvalidInputError("need at least one token")
    c = cache.committed_len
    if c + n > cache.capacity:
        raise CapacityError(f"context overflow: {c} committed + {n} new > {cache.capacity}")
    cache.clear_speculative()
    positions = np.arange(c, c + n)
    mask = np.arange(c + n)[None, :] <= positions[:, None]

    def write(li, k, v):
        cache.keys[li, c : c + n] = k
        cache.values[li, c : c + n] = v

    hidden = _run_layers(provider, toks, positions, cache, write, mask)
    cache.committed_len = c + n
    if all_logits:
        return _logits(provider, hidden)
    return _logits(provider, hidden[-1:])[0]


def forward_tree(provider, tree_tokens, parent_index, positions, cache) -> np.ndarray:
    """Tree-masked forward of new speculative nodes; returns logits per node.

    New nodes get ids ``cache.speculative_nodes + i``. ``parent_index[i]`` is
    either -1 (the node hangs directly off the committed prefix, at position
    ``committed_len``) or the id of an earlier speculative node, in which case
    its position must be the parent's plus one. Each node attends to the whole
    committed prefix plus its own ancestors and itself.
    """
    from .kvtree import append_speculative

    cfg = provider.config
    toks = _check_tokens(tree_tokens, cfg.vocab_size)
    n = toks.size
    parents = [int(p) for p in parent_index]
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if len(parents) != n or pos.size != n:
        raise StructureError("tree_tokens, parent_index and positions must have equal length")
    if n == 0:
        return np.zeros((0, cfg.vocab_size))
    ids = cache.register_nodes(parents, pos)
    c = cache.committed_len
    kv_end = c + ids[-1] + 1
    mask = np.zeros((n, kv_end), dtype=bool)
    mask[:, :c] = True
    for row, node in enumerate(ids):
        mask[row, c + cache.ancestors(node)] = True

    def write(li, k, v):
        slots = append_speculative(cache, li, k, v)
        if slots[0] != c + ids[0]:
            raise StructureError("layer speculative fill out of step with registered nodes")

    hidden = _run_layers(provider, toks, pos, cache, write, mask)
    return _logits(provider, hidden)


# ---------------------------------------------------------------------------
# Checkpoint file
#
# Little-endian. Header: magic b"TFW1", then num_layers, hidden_dim, num_heads,
# ffn_dim, vocab_size, max_context as uint32, then rope_base as float64.
# Body: float64 arrays, row-major, in order embedding; per layer wq, wk, wv,
# wo, w_gate, w_up, w_down, attn_norm, mlp_norm; final_norm; head.
# ---------------------------------------------------------------------------

_MAGIC = b"TFW1"
_HEADER = struct.Struct("<4s6Id")


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, cfg.num_layers, cfg.hidden_dim, cfg.num_heads,
                              cfg.ffn_dim, cfg.vocab_size, cfg.max_context, float(cfg.rope_base)))
        for arr in _weight_arrays(weights):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError("truncated weight file")
    magic, nl, hd, nh, ffn, vocab, ctx, base = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise InvalidInputError("not a weight checkpoint")
    cfg = ModelConfig(nl, hd, nh, ffn, vocab, ctx, base)
    offset = _HEADER.size

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise InvalidInputError("truncated weight file")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
        return arr

    embedding = take(vocab, hd)
    layers = []
    for _ in range(nl):
        layers.append(LayerWeights(
            wq=take(hd, hd), wk=take(hd, hd), wv=take(hd, hd), wo=take(hd, hd),
            w_gate=take(hd, ffn), w_up=take(hd, ffn), w_down=take(ffn, hd),
            attn_norm=take(hd), mlp_norm=take(hd),
        ))
    final_norm = take(hd)
    head = take(hd, vocab)
    if offset != len(data):
        raise InvalidInputError("trailing bytes in weight file")
    return ModelWeights(cfg, embedding, layers, final_norm, head)


def _weight_arrays(weights: ModelWeights):
    yield weights.embedding
    for layer in weights.layers:
        yield from layer.arrays()
    yield weights.final_norm
    yield weights.head
