"""Tree verification, lossless acceptance and the generation loop.

Acceptance walks the tree from the root. At the current node a token is drawn
from the target's (tempered) distribution; if some child carries that token
the walk descends into it, otherwise the token is emitted and the iteration
ends. A walk that reaches a leaf emits the token drawn there as a bonus.
Every emitted token is therefore a genuine sample of the target at its own
context, which makes the output distribution identical to target-only
sampling for any draft.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drafter import DraftParams, DraftTree, expand_tree, flatten_tree
from .errors import CapacityError, InvalidInputError, StructureError
from .kvtree import SharedKVCache, commit_accepted, prefill_chunked
from .tinyformer import forward_sequential, forward_tree, tempered_softmax


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Philox4x64-10 substream keyed by the 128-bit pair (seed, iteration)."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(iteration) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_token(probs: np.ndarray, rng: np.random.Generator | None) -> int:
    """Inverse-CDF draw with one uniform; argmax when ``rng`` is None."""
    if rng is None:
        return int(np.argmax(probs))
    cdf = np.add.accumulate(probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    if idx >= probs.size:
        idx = int(np.flatnonzero(probs)[-1])
    return idx


@dataclass
class AcceptanceResult:
    accepted_path: list[int]  # tree node ids below the root, root-descending
    emitted: list[int]

    @property
    def tokens_emitted(self) -> int:
        return len(self.emitted)


@dataclass
class GenerationTrace:
    tokens_emitted: list[int] = field(default_factory=list)
    truncated: bool = False

    @property
    def iterations(self) -> int:
        return len(self.tokens_emitted)

    @property
    def total_tokens(self) -> int:
        return sum(self.tokens_emitted)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "tokens_emitted", "cumulative_tokens"])
            total = 0
            for i, n in enumerate(self.tokens_emitted):
                total += n
                writer.writerow([i, n, total])


def accept_walk(tree: DraftTree, probs_at: Callable[[int], np.ndarray],
                rng: np.random.Generator | None) -> AcceptanceResult:
    """Membership acceptance over ``tree`` given target probabilities per node."""
    children = tree.children_map()
    node = 0
    accepted: list[int] = []
    emitted: list[int] = []
    while True:
        x = sample_token(probs_at(node), rng)
        emitted.append(x)
        child = children[node].get(x)
        if child is None:
            return AcceptanceResult(accepted, emitted)
        accepted.append(child)
        node = child


def verify_and_sample(target, cache: SharedKVCache, tree: DraftTree, temperature: float,
                      rng: np.random.Generator | None) -> AcceptanceResult:
    """One target pass over the whole tree, then acceptance and commit.

    The target's K/V overwrite whatever the draft left in the speculative
    region; the root plus accepted nodes are then committed.
    """
    c = cache.committed_len
    tokens, parents, positions = flatten_tree(tree, c, include_root=True)
    if parents != tree.parents or tokens != tree.tokens:
        raise StructureError("tree nodes are not in depth-major order")
    for node in range(cache.speculative_nodes):
        if node >= len(tree) or cache.parent(node) != tree.parents[node]:
            raise StructureError("speculative region does not hold this tree")
    if c + len(tree) > cache.capacity:
        raise CapacityError("tree does not fit in the cache")
    cache.clear_speculative()
    logits = forward_tree(target, tokens, parents, positions, cache)
    greedy = temperature == 0
    result = accept_walk(tree, lambda n: tempered_softmax(logits[n], temperature),
                         None if greedy else rng)
    commit_accepted(cache, [0] + result.accepted_path)
    return result


Observer = Callable[[int, SharedKVCache, list[int]], None]


def decode(target, draft_view, prompt: Sequence[int], params: DraftParams, temperature: float,
           max_new_tokens: int, seed: int = 0, *, chunk_size: int = 256, shared_kv: bool = True,
           eos_token: int | None = None, observer: Observer | None = None):
    """Speculative generation; returns ``(tokens, trace)``.

    ``prompt[:-1]`` is prefilled in chunks and the last prompt token becomes
    the first tree root, so every generated token comes out of a verification
    step. With ``shared_kv=False`` the draft keeps its own cache, built from
    its own weights. Generation stops cleanly with ``trace.truncated`` set when
    the next tree no longer fits. ``observer(iteration, cache, generated)``
    runs after every commit.
    """
    if max_new_tokens < 1:
        raise InvalidInputError("max_new_tokens must be at least 1")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must not be empty")
    cfg = target.config
    cache = SharedKVCache.for_config(cfg)
    if len(prompt) > cache.capacity:
        raise CapacityError("prompt does not fit the cache")
    draft_cache = cache if shared_kv else SharedKVCache.for_config(cfg)
    if len(prompt) > 1:
        prefill_chunked(target, prompt[:-1], chunk_size, cache)
        if not shared_kv:
            prefill_chunked(draft_view, prompt[:-1], chunk_size, draft_cache)
    root = prompt[-1]
    out: list[int] = []
    trace = GenerationTrace()
    iteration = 0
    while len(out) < max_new_tokens:
        if cache.committed_len + params.tree_size > cache.capacity:
            trace.truncated = True
            break
        tree = expand_tree(draft_view, draft_cache, root, params)
        rng = None if temperature == 0 else iteration_rng(seed, iteration)
        result = verify_and_sample(target, cache, tree, temperature, rng)
        if not shared_kv:
            draft_cache.clear_speculative()
            forward_sequential(draft_view, [root] + [tree.tokens[i] for i in result.accepted_path], draft_cache)
        trace.tokens_emitted.append(result.tokens_emitted)
        out.extend(result.emitted)
        if observer is not None:
            observer(iteration, cache, list(out))
        iteration += 1
        root = out[-1]
        if eos_token is not None and eos_token in result.emitted:
            out = out[: out.index(eos_token) + 1]
            break
    return out[:max_new_tokens], trace


def ar_decode(target, prompt: Sequence[int], max_new_tokens: int, temperature: float = 0.0,
              seed: int = 0, *, chunk_size: int = 256, eos_token: int | None = None) -> list[int]:
    """Plain autoregressive decoding of the target (the losslessness reference)."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must not be empty")
    cache = SharedKVCache.for_config(target.config)
    logits = prefill_chunked(target, prompt, chunk_size, cache)
    rng = None if temperature == 0 else np.random.Generator(np.random.Philox(key=int(seed)))
    out: list[int] = []
    while True:
        tok = sample_token(tempered_softmax(logits, temperature), rng)
        out.append(tok)
        if len(out) >= max_new_tokens or tok == eos_token or cache.committed_len >= cache.capacity:
            return out
        logits = forward_sequential(target, [tok], cache)


def measure_tau(trace: GenerationTrace) -> float:
    """Average acceptance length: mean tokens emitted per iteration."""
    if not trace.tokens_emitted:
        raise InvalidInputError("trace has no iterations")
    return sum(trace.tokens_emitted) / len(trace.tokens_emitted)
