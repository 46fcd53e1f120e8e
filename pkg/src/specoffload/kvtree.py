"""The single KV-cache shared by draft and target.

Layout per layer is one static allocation of ``capacity`` rows. Rows
``[0, committed_len)`` hold exact target K/V for the emitted context. The
speculative region starts right after it: speculative node ``i`` lives at slot
``committed_len + i``. The draft fills that region while growing a tree, the
target's verification pass overwrites it, and :func:`commit_accepted` compacts
the accepted path down into the committed region.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError, StructureError


class SharedKVCache:
    def __init__(self, num_layers: int, width: int, capacity: int):
        if capacity < 1:
            raise InvalidInputError("capacity must be positive")
        self.capacity = int(capacity)
        self.keys = np.zeros((num_layers, capacity, width))
        self.values = np.zeros((num_layers, capacity, width))
        self.committed_len = 0
        self._parents: list[int] = []
        self._positions: list[int] = []
        self._ancestors: list[np.ndarray] = []
        self._fill = [0] * num_layers

    @classmethod
    def for_config(cls, config) -> "SharedKVCache":
        return cls(config.num_layers, config.hidden_dim, config.max_context)

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def speculative_nodes(self) -> int:
        """Number of registered speculative tree nodes."""
        return len(self._parents)

    @property
    def speculative_slots(self) -> int:
        """Speculative rows in use (the largest per-layer fill)."""
        return max(self._fill, default=0)

    @property
    def free_slots(self) -> int:
        return self.capacity - self.committed_len - max(self.speculative_slots, self.speculative_nodes)

    def slot_of(self, node: int) -> int:
        return self.committed_len + node

    def parent(self, node: int) -> int:
        return self._parents[node]

    def ancestors(self, node: int) -> np.ndarray:
        """Speculative ids of ``node``'s ancestors and itself, root first."""
        return self._ancestors[node]

    def reset(self) -> None:
        self.committed_len = 0
        self.clear_speculative()
        self.keys[:] = 0.0
        self.values[:] = 0.0

    def clear_speculative(self) -> None:
        self._parents.clear()
        self._positions.clear()
        self._ancestors.clear()
        self._fill = [0] * self.num_layers

    def register_nodes(self, parents: Sequence[int], positions=None) -> list[int]:
        """Validate and record tree topology for new nodes; returns their ids.

        Raises before touching any state if a parent link points forward or
        the region would overflow.
        """
        start = len(self._parents)
        n = len(parents)
        if self.committed_len + start + n > self.capacity:
            raise CapacityError(
                f"speculative overflow: {self.committed_len} committed + {start + n} nodes > {self.capacity}"
            )
        new_pos = []
        for i, p in enumerate(parents):
            node = start + i
            if p < -1 or p >= node:
                raise StructureError(f"node {node} has invalid parent {p}")
            if positions is not None:
                expected = self.committed_len if p == -1 else (
                    self._positions[p] if p < start else new_pos[p - start]
                ) + 1
                if int(positions[i]) != expected:
                    raise StructureError(f"node {node} at position {positions[i]}, expected {expected}")
                new_pos.append(expected)
        ids = []
        for i, p in enumerate(parents):
            node = start + i
            self._parents.append(int(p))
            self._positions.append(new_pos[i] if positions is not None else -1)
            anc = np.array([node]) if p == -1 else np.append(self._ancestors[p], node)
            self._ancestors.append(anc)
            ids.append(node)
        return ids

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the committed K and V, shape (layers, committed_len, width)."""
        c = self.committed_len
        return self.keys[:, :c].copy(), self.values[:, :c].copy()

    def dump(self, path) -> None:
        """Debug dump: b"KVC1", uint32 layers, committed_len, width; then K and V as float64."""
        k, v = self.snapshot()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4s3I", b"KVC1", self.num_layers, self.committed_len, k.shape[2]))
            fh.write(np.ascontiguousarray(k, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def append_speculative(cache: SharedKVCache, layer: int, k_rows, v_rows) -> np.ndarray:
    """Store K/V rows for new tree nodes of one layer; returns their slot indices."""
    k_rows = np.asarray(k_rows, dtype=np.float64)
    v_rows = np.asarray(v_rows, dtype=np.float64)
    n = k_rows.shape[0]
    if v_rows.shape[0] != n:
        raise InvalidInputError("K and V row counts differ")
    start = cache.committed_len + cache._fill[layer]
    if start + n > cache.capacity:
        raise CapacityError(f"speculative overflow in layer {layer}")
    if n:
        cache.keys[layer, start : start + n] = k_rows
        cache.values[layer, start : start + n] = v_rows
        cache._fill[layer] += n
    return np.arange(start, start + n)


def commit_accepted(cache: SharedKVCache, accepted_path: Sequence[int], target_kv=None) -> int:
    """Move the accepted root-descending path into the committed region.

    ``target_kv`` is a per-layer sequence of ``(k_rows, v_rows)`` for the path
    nodes, as computed by the target. When omitted, the rows currently in the
    speculative slots are used; after a verification pass those are the
    target's. The speculative region is cleared either way.
    """
    path = [int(i) for i in accepted_path]
    m = len(path)
    if m:
        prev = -1
        for node in path:
            if not 0 <= node < cache.speculative_nodes or cache.parent(node) != prev:
                raise StructureError(f"accepted path {path} is not a root-descending path")
            prev = node
    c = cache.committed_len
    if m:
        if target_kv is None:
            slots = [c + node for node in path]
            rows = [(cache.keys[li, slots].copy(), cache.values[li, slots].copy()) for li in range(cache.num_layers)]
        else:
            if len(target_kv) != cache.num_layers:
                raise InvalidInputError("target_kv must have one entry per layer")
            rows = [(np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64)) for k, v in target_kv]
            if any(k.shape[0] != m or v.shape[0] != m for k, v in rows):
                raise InvalidInputError("target_kv rows must match the path length")
        for li, (k, v) in enumerate(rows):
            cache.keys[li, c : c + m] = k
            cache.values[li, c : c + m] = v
    cache.clear_speculative()
    cache.committed_len = c + m
    return cache.committed_len


def prefill_chunked(target, prompt: Sequence[int], chunk_size: int, cache: SharedKVCache) -> np.ndarray:
    """Build the committed cache for ``prompt`` in chunks of ``chunk_size`` tokens.

    Returns the last position's logits. Bitwise identical to a single-pass
    prefill; at most ``chunk_size`` tokens are in flight per forward.
    """
    from .tinyformer import forward_sequential

    toks = list(prompt)
    if not toks:
        raise InvalidInputError("prompt must not be empty")
    if chunk_size < 1:
        raise InvalidInputError("chunk_size must be positive")
    if cache.committed_len + len(toks) > cache.capacity:
        raise CapacityError(f"prompt of {len(toks)} tokens does not fit")
    logits = None
    for lo in range(0, len(toks), chunk_size):
        logits = forward_sequential(target, toks[lo : lo + chunk_size], cache)
    return logits


def chunk_sizes(prompt_len: int, chunk_size: int) -> list[int]:
    """Token counts of the chunks ``prefill_chunked`` will run."""
    full, rest = divmod(prompt_len, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])
