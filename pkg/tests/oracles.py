"""Reference implementations used only by tests.

Each one is written from the model definition rather than from the package
code: plain matmuls and full recomputation for the transformer, exact
rationals for tree selection, a critical-path computation for the pipeline.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# -- transformer --------------------------------------------------------------

def _rms(x, gain, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _rope(x, pos, n_heads, base):
    n, width = x.shape
    dh = width // n_heads
    out = x.reshape(n, n_heads, dh).copy()
    for i in range(dh // 2):
        theta = pos * base ** (-2.0 * i / dh)
        c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
        a, b = out[:, :, 2 * i].copy(), out[:, :, 2 * i + 1].copy()
        out[:, :, 2 * i] = a * c - b * s
        out[:, :, 2 * i + 1] = a * s + b * c
    return out.reshape(n, width)


def ref_forward(weights, tokens, positions=None, visible=None):
    """Logits for every token; ``visible[i]`` lists the rows token i attends to.

    Defaults to a causal sequence at positions 0..n-1.
    """
    cfg = weights.config
    n = len(tokens)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    if visible is None:
        visible = [list(range(i + 1)) for i in range(n)]
    dh = cfg.hidden_dim // cfg.num_heads
    x = weights.embedding[np.asarray(tokens)]
    for li in range(cfg.num_layers):
        lw = weights.layer(li)
        a = _rms(x, lw.attn_norm)
        q = _rope(a @ lw.wq, pos, cfg.num_heads, cfg.rope_base)
        k = _rope(a @ lw.wk, pos, cfg.num_heads, cfg.rope_base)
        v = a @ lw.wv
        attn = np.zeros_like(x)
        for i in range(n):
            rows = visible[i]
            for h in range(cfg.num_heads):
                sl = slice(h * dh, (h + 1) * dh)
                s = k[rows, sl] @ q[i, sl] / math.sqrt(dh)
                w = np.exp(s - s.max())
                attn[i, sl] = (w / w.sum()) @ v[rows, sl]
        x = x + attn @ lw.wo
        m = _rms(x, lw.mlp_norm)
        g = m @ lw.w_gate
        x = x + (g / (1 + np.exp(-g)) * (m @ lw.w_up)) @ lw.w_down
    return _rms(x, weights.final_norm) @ weights.head


def softmax(x, t=1.0):
    z = np.asarray(x, dtype=np.float64) / t
    e = np.exp(z - z.max())
    return e / e.sum()


# -- quantization -------------------------------------------------------------

def ref_quantize_group(values, bits):
    """Per-element affine rule with Python's round (half to even)."""
    lo, hi = min(values), max(values)
    levels = 2**bits - 1
    scale = (hi - lo) / levels if (hi - lo) / levels > 0 else 1.0
    codes = [min(max(round((x - lo) / scale), 0), levels) for x in values]
    return codes, scale, lo


# -- tree selection -----------------------------------------------------------

def sharpen_exact(probs, inv_t: int):
    """``p**(1/T) / sum`` in exact rationals for integer ``1/T``."""
    powered = [Fraction(p) ** inv_t for p in probs]
    total = sum(powered)
    return [p / total for p in powered]


def enumerate_tree(dist_of, root, vocab, k, depth, inv_t):
    """Exhaustive global top-k per depth over (leaf x vocab) candidates.

    ``dist_of(path)`` returns the draft distribution (rationals) after the
    token path. Candidates are ranked by exact cumulative sharpened
    probability, then smaller token, then smaller parent. Returns the list of
    levels, each a list of (parent_node, token) in selection order.
    """
    nodes = [((root,), Fraction(1), -1)]  # (path, score, parent)
    frontier = [0]
    levels = []
    for _ in range(depth):
        cands = []
        for node in frontier:
            path, score, _ = nodes[node]
            sharp = sharpen_exact(dist_of(path), inv_t)
            for tok in range(vocab):
                cands.append((score * sharp[tok], tok, node))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        chosen = cands[:k]
        frontier = []
        level = []
        for score, tok, parent in chosen:
            nodes.append((nodes[parent][0] + (tok,), score, parent))
            frontier.append(len(nodes) - 1)
            level.append((parent, tok))
        levels.append(level)
    return levels


def transitive_closure(parents):
    """Ancestor-or-self relation by repeated boolean squaring."""
    n = len(parents)
    r = np.eye(n, dtype=bool)
    for i, p in enumerate(parents):
        if p >= 0:
            r[i, p] = True
    while True:
        nxt = r | ((r.astype(int) @ r.astype(int)) > 0)
        if (nxt == r).all():
            return r
        r = nxt


# -- pipeline -----------------------------------------------------------------

def critical_path(compute, transfer, overlap=True, slots=2, window=0.0):
    """Makespan as the longest path through the precedence graph.

    Nodes are the copy and compute tasks; edges encode data dependencies,
    in-order streams and buffer reuse. Start times are the longest
    path from a source whose release time is 0 (compute) or -window (copy).
    """
    n = len(compute)
    off = [i for i in range(n) if transfer[i] is not None]
    start = {}
    end = {}
    for i in range(n):
        # copies that must precede compute i are scheduled first
        if transfer[i] is not None:
            m = off.index(i)
            if overlap:
                preds = [-window]
                if m:
                    preds.append(end[("T", off[m - 1])])
                if m >= slots:
                    preds.append(end[("C", off[m - slots])])
            else:
                preds = [0.0] + ([end[("C", i - 1)]] if i else [])
            start[("T", i)] = max(preds)
            end[("T", i)] = start[("T", i)] + transfer[i]
        preds = [0.0]
        if i:
            preds.append(end[("C", i - 1)])
        if transfer[i] is not None:
            preds.append(end[("T", i)])
        start[("C", i)] = max(preds)
        end[("C", i)] = start[("C", i)] + compute[i]
    return end[("C", n - 1)] if n else 0.0


# -- sequence distributions ---------------------------------------------------

def exact_sequence_distribution(next_probs, prompt, horizon):
    """All continuations of length ``horizon`` with their probabilities."""
    out = {}
    vocab = len(next_probs(tuple(prompt)))
    for seq in itertools.product(range(vocab), repeat=horizon):
        p = 1.0
        ctx = tuple(prompt)
        for tok in seq:
            p *= next_probs(ctx)[tok]
            ctx = ctx + (tok,)
        out[seq] = p
    return out
