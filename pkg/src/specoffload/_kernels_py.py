"""Pure numpy fallback for the compiled kernels.

Reductions are unrolled along their index (or done with ``np.add.accumulate``,
which is strictly sequential) so each output element sees the same sequence of
roundings as the compiled loop. ``np.sum``/``np.dot`` are avoided on purpose:
their blocking depends on array shape.
"""

from __future__ import annotations

import numpy as np

# Elements per temporary in weighted_values; bounds peak memory only.
_CHUNK_ELEMS = 1 << 21


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, din = x.shape
    if din == 0:
        return np.zeros((n, w.shape[1]))
    out = x[:, 0:1] * w[0]
    for j in range(1, din):
        out = out + x[:, j : j + 1] * w[j]
    return out


def masked_scores(q, k, mask, n_heads: int, scale: float) -> np.ndarray:
    nq, width = q.shape
    nk = k.shape[0]
    dh = width // n_heads
    qh = q.reshape(nq, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(nk, n_heads, dh).transpose(1, 0, 2)
    s = qh[:, :, None, 0] * kh[:, None, :, 0]
    for d in range(1, dh):
        s = s + qh[:, :, None, d] * kh[:, None, :, d]
    s = s * scale
    s[:, ~mask.astype(bool)] = -np.inf
    return np.ascontiguousarray(s)


def weighted_values(e, v, mask) -> np.ndarray:
    # Masked weights are exact zeros; adding them never changes a running sum
    # that starts at +0.0, so this matches the compiled skip-masked loop.
    n_heads, nq, nk = e.shape
    width = v.shape[1]
    dh = width // n_heads
    e = np.where(mask.astype(bool)[None], e, 0.0)
    vh = v.reshape(nk, n_heads, dh).transpose(1, 0, 2)
    out = np.empty((nq, width))
    step = max(1, _CHUNK_ELEMS // max(1, n_heads * (nk + 1) * dh))
    for lo in range(0, nq, step):
        hi = min(nq, lo + step)
        ec = e[:, lo:hi, :]
        prod = ec[..., None] * vh[:, None, :, :]
        prod = np.concatenate([np.zeros_like(prod[:, :, :1]), prod], axis=2)
        num = np.add.accumulate(prod, axis=2)[:, :, -1]
        den_terms = np.concatenate([np.zeros_like(ec[:, :, :1]), ec], axis=2)
        den = np.add.accumulate(den_terms, axis=2)[:, :, -1]
        out[lo:hi] = (num / den[..., None]).transpose(1, 0, 2).reshape(hi - lo, width)
    return out


def quantize_groups(groups: np.ndarray, bits: int):
    levels = float((1 << bits) - 1)
    lo = groups.min(axis=1)
    hi = groups.max(axis=1)
    scales = (hi - lo) / levels
    # constant groups, and ranges so small the scale underflows, get scale 1
    scales[~(scales > 0.0)] = 1.0
    t = np.rint((groups - lo[:, None]) / scales[:, None])
    codes = np.clip(t, 0.0, levels).astype(np.uint8)
    return codes, scales, lo.copy()


def dequantize_groups(codes: np.ndarray, scales: np.ndarray, zeros: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * scales[:, None] + zeros[:, None]
