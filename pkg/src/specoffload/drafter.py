"""Deep dynamic draft trees grown by global top-k over cumulative scores.

At every depth all current leaves are expanded in one draft pass. Each
(leaf, token) pair is scored by the leaf's cumulative log-score plus the log
of the *sharpened* draft probability, and the k best pairs across the whole
level become the next leaves. Sharpening only steers the search: the
unsharpened draft distributions are what the tree retains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError
from .tinyformer import forward_tree, tempered_softmax


@dataclass(frozen=True)
class DraftParams:
    depth: int = 48
    top_k: int = 6
    sharpen_temperature: float = 0.2

    def __post_init__(self):
        if not isinstance(self.depth, (int, np.integer)) or self.depth < 1:
            raise InvalidInputError(f"depth must be a positive integer, got {self.depth!r}")
        if not isinstance(self.top_k, (int, np.integer)) or self.top_k < 1:
            raise InvalidInputError(f"top_k must be a positive integer, got {self.top_k!r}")
        if not self.sharpen_temperature >= 0:
            raise InvalidInputError("sharpen_temperature must be non-negative")

    @property
    def tree_size(self) -> int:
        """Nodes including the root."""
        return 1 + self.top_k * self.depth


@dataclass
class DraftTree:
    tokens: list[int]
    parents: list[int]
    depths: list[int]
    scores: list[float]
    # Unsharpened draft distribution for every node that was expanded.
    draft_probs: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def root_token(self) -> int:
        return self.tokens[0]

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    def children(self, node: int) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == node]

    def children_map(self) -> dict[int, dict[int, int]]:
        """node -> {child token: child node}."""
        out: dict[int, dict[int, int]] = {i: {} for i in range(len(self))}
        for i, p in enumerate(self.parents):
            if p >= 0:
                out[p][self.tokens[i]] = i
        return out

    def path_to(self, node: int) -> list[int]:
        path = []
        while node >= 0:
            path.append(node)
            node = self.parents[node]
        return path[::-1]

    def level(self, depth: int) -> list[int]:
        return [i for i, d in enumerate(self.depths) if d == depth]

    def dump(self) -> str:
        """One tab-separated line per node: depth, token, parent, cum_log_score."""
        return "".join(
            f"{d}\t{t}\t{p}\t{s!r}\n" for d, t, p, s in zip(self.depths, self.tokens, self.parents, self.scores)
        )


def sharpened_log_probs(distribution, temperature: float) -> np.ndarray:
    """log of ``p**(1/T)`` renormalised, computed in the log domain."""
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("not a probability vector")
    if temperature == 0:
        out = np.full(p.size, -np.inf)
        out[int(np.argmax(p))] = 0.0
        return out
    with np.errstate(divide="ignore"):
        lt = np.log(p) / temperature
    m = lt.max()
    return lt - (m + np.log(np.add.accumulate(np.exp(lt - m))[-1]))


def score_children(parent_score: float, distribution, temperature: float) -> np.ndarray:
    """Candidate cumulative log-scores for every token under one parent.

    Zero-probability tokens (and, at temperature 0, every non-argmax token)
    score -inf.
    """
    return parent_score + sharpened_log_probs(distribution, temperature)


StepFn = Callable[[list[int], list[int], list[int], list[int]], np.ndarray]


def grow_tree(step: StepFn, root_token: int, params: DraftParams, vocab_size: int) -> DraftTree:
    """Grow a tree given a draft step function.

    ``step(node_ids, tokens, parents, depths)`` returns one draft distribution
    per listed node (shape ``(n, vocab_size)``). Nodes are handed over in id
    order, each exactly once, parents before children.

    Selection is the global top-k over all candidates at a depth, ordered by
    score, then smaller token id, then smaller parent id. Candidates scoring
    -inf rank last and are only taken when fewer than k finite ones exist, so
    every depth always carries exactly k nodes.
    """
    if params.top_k > vocab_size:
        raise InvalidInputError("top_k cannot exceed the vocabulary size")
    tree = DraftTree([int(root_token)], [-1], [0], [0.0])
    frontier = [0]
    vocab = np.arange(vocab_size)
    for depth in range(1, params.depth + 1):
        dists = np.asarray(step(frontier, [tree.tokens[i] for i in frontier],
                                [tree.parents[i] for i in frontier], [tree.depths[i] for i in frontier]))
        cand = np.empty((len(frontier), vocab_size))
        for row, node in enumerate(frontier):
            tree.draft_probs[node] = dists[row]
            cand[row] = score_children(tree.scores[node], dists[row], params.sharpen_temperature)
        flat_scores = cand.reshape(-1)
        flat_tokens = np.tile(vocab, len(frontier))
        flat_parents = np.repeat(np.asarray(frontier), vocab_size)
        order = np.lexsort((flat_parents, flat_tokens, -flat_scores))[: params.top_k]
        frontier = []
        for idx in order:
            tree.tokens.append(int(flat_tokens[idx]))
            tree.parents.append(int(flat_parents[idx]))
            tree.depths.append(depth)
            tree.scores.append(float(flat_scores[idx]))
            frontier.append(len(tree.tokens) - 1)
    return tree


def expand_tree(draft, cache, root_token: int, params: DraftParams) -> DraftTree:
    """Grow a draft tree with the draft model over the cache's committed context.

    The root sits at position ``committed_len``; each depth is one tree-masked
    draft forward whose K/V land in the speculative region. The deepest level
    is selected but never forwarded. Requires room for the full tree of
    ``1 + k*D`` nodes that verification will write.
    """
    need = params.tree_size
    if cache.committed_len + need > cache.capacity:
        raise CapacityError(
            f"tree of {need} nodes does not fit after {cache.committed_len} committed tokens"
        )
    cache.clear_speculative()
    base = cache.committed_len

    def step(nodes, tokens, parents, depths):
        if nodes[0] != cache.speculative_nodes:
            raise InvalidInputError("draft nodes must be forwarded in id order")
        logits = forward_tree(draft, tokens, parents, [base + d for d in depths], cache)
        return np.stack([tempered_softmax(row, 1.0) for row in logits])

    return grow_tree(step, root_token, params, draft.config.vocab_size)


def flatten_tree(tree: DraftTree, committed_len: int, include_root: bool = False):
    """Depth-major flat arrays ``(tokens, parent_index, positions)``.

    The root sits at ``committed_len``. Without the root, its children get
    parent -1; with it, the root is entry 0 with parent -1.
    """
    order = sorted(range(len(tree)), key=lambda i: (tree.depths[i], i))
    if not include_root:
        order = [i for i in order if tree.parents[i] != -1]
    index = {node: j for j, node in enumerate(order)}
    tokens = [tree.tokens[i] for i in order]
    parents = [index.get(tree.parents[i], -1) for i in order]
    positions = [committed_len + tree.depths[i] for i in order]
    return tokens, parents, positions


def ancestor_mask(parents: Sequence[int]) -> np.ndarray:
    """Boolean (n, n) mask: row i marks i and all its ancestors in the flat tree."""
    n = len(parents)
    mask = np.zeros((n, n), dtype=bool)
    for i, p in enumerate(parents):
        if p >= 0:
            mask[i] = mask[p]
        mask[i, i] = True
    return mask
