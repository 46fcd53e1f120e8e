"""Data-free group-wise affine quantization for substitute layers.

Tensors are flattened row-major and cut into groups of ``group_size``
elements (the last group may be short). Per group with minimum ``m`` and
maximum ``M``::

    scale = (M - m) / (2**bits - 1)      (1.0 when that is zero)
    code  = clip(round_half_even((x - m) / scale), 0, 2**bits - 1)
    x_hat = code * scale + m

so every element reconstructs to within ``scale / 2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .tinyformer import LayerWeights


@dataclass(frozen=True)
class QuantGroupSpec:
    bits: int = 4
    group_size: int = 64

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise InvalidInputError(f"bits must be an integer in [2, 8], got {self.bits!r}")
        if not isinstance(self.group_size, (int, np.integer)) or self.group_size < 1:
            raise InvalidInputError(f"group_size must be a positive integer, got {self.group_size!r}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(eq=False)
class QuantizedTensor:
    codes: np.ndarray  # uint8, shape (n_groups, group_size); padding codes are ignored
    scales: np.ndarray
    zero_points: np.ndarray
    shape: tuple[int, ...]
    spec: QuantGroupSpec

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_groups(self) -> int:
        return self.codes.shape[0]

    def element_scales(self) -> np.ndarray:
        """Scale of the group each element belongs to, in the tensor's shape."""
        g = self.spec.group_size
        return np.repeat(self.scales, g)[: self.size].reshape(self.shape)

    def flat_codes(self) -> np.ndarray:
        return self.codes.reshape(-1)[: self.size]


def _grouped(flat: np.ndarray, group_size: int) -> np.ndarray:
    n = flat.size
    n_groups = -(-n // group_size)
    pad = n_groups * group_size - n
    if pad:
        # Edge padding leaves every group's min and max unchanged.
        flat = np.concatenate([flat, np.full(pad, flat[-1])])
    return flat.reshape(n_groups, group_size)


def quantize(tensor, spec: QuantGroupSpec = QuantGroupSpec()) -> QuantizedTensor:
    arr = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("cannot quantize non-finite values")
    if arr.size and not np.isfinite(arr.max() - arr.min()):
        raise InvalidInputError("value range overflows float64")
    shape = tuple(arr.shape)
    if arr.size == 0:
        empty = np.zeros((0, spec.group_size), dtype=np.uint8)
        return QuantizedTensor(empty, np.zeros(0), np.zeros(0), shape, spec)
    codes, scales, zeros = kernels.quantize_groups(_grouped(arr.reshape(-1), spec.group_size), spec.bits)
    return QuantizedTensor(codes, scales, zeros, shape, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.size == 0:
        return np.zeros(q.shape)
    full = kernels.dequantize_groups(q.codes, q.scales, q.zero_points)
    return full.reshape(-1)[: q.size].reshape(q.shape)


@dataclass(eq=False)
class SubstituteLayer:
    """Quantized stand-in for one decoder block; norm gains stay full precision."""

    quantized: dict[str, QuantizedTensor]
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    spec: QuantGroupSpec

    @cached_property
    def weights(self) -> LayerWeights:
        """Dequantized weights, the form the draft actually computes with."""
        mats = {name: dequantize(self.quantized[name]) for name in LayerWeights.MATRICES}
        return LayerWeights(**mats, attn_norm=self.attn_norm, mlp_norm=self.mlp_norm)

    def matrix_bytes(self) -> int:
        return sum(quantized_bytes(q.size, self.spec) for q in self.quantized.values())


def build_substitute_layer(layer: LayerWeights, spec: QuantGroupSpec = QuantGroupSpec()) -> SubstituteLayer:
    quantized = {name: quantize(getattr(layer, name), spec) for name in LayerWeights.MATRICES}
    return SubstituteLayer(quantized, layer.attn_norm.copy(), layer.mlp_norm.copy(), spec)


def quantized_bytes(n_elements: int, spec: QuantGroupSpec, metadata_bytes_per_group: int = 4) -> float:
    """Storage of one quantized matrix: packed codes plus per-group scale and zero.

    Codes cost ``bits/8`` bytes per element, i.e. ``bits/16`` of a 16-bit
    matrix; metadata defaults to a 16-bit scale and a 16-bit zero point.
    """
    n_groups = -(-n_elements // spec.group_size)
    return n_elements * spec.bits / 8 + n_groups * metadata_bytes_per_group


# ---------------------------------------------------------------------------
# Quantized checkpoint
#
# Little-endian. Header: magic b"TFQ1", uint32 bits, uint32 group_size,
# uint32 matrix count. Per matrix in declaration order: uint32 ndim, uint32
# dims..., uint32 n_groups, then codes (two per byte, low nibble first, when
# bits <= 4; one per byte otherwise; a trailing odd code is padded with a zero
# nibble), then float64 scales, then float64 zero points.
# ---------------------------------------------------------------------------

_MAGIC = b"TFQ1"


def _pack_codes(flat: np.ndarray, bits: int) -> bytes:
    flat = flat.astype(np.uint8)
    if bits > 4:
        return flat.tobytes()
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def _unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits > 4:
        return raw[:count].copy()
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


def save_quantized(tensors: list[QuantizedTensor], path, spec: QuantGroupSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4s3I", _MAGIC, spec.bits, spec.group_size, len(tensors)))
        for q in tensors:
            fh.write(struct.pack(f"<I{len(q.shape)}I", len(q.shape), *q.shape))
            fh.write(struct.pack("<I", q.n_groups))
            fh.write(_pack_codes(q.codes.reshape(-1), spec.bits))
            fh.write(np.ascontiguousarray(q.scales, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(q.zero_points, dtype="<f8").tobytes())


def load_quantized(path) -> tuple[QuantGroupSpec, list[QuantizedTensor]]:
    data = Path(path).read_bytes()
    try:
        spec, tensors, end = _parse_quantized(data)
    except (struct.error, ValueError) as exc:
        raise InvalidInputError(f"truncated or corrupt quantized checkpoint: {exc}") from None
    if end != len(data):
        raise InvalidInputError(f"quantized checkpoint has {len(data) - end} trailing bytes")
    return spec, tensors


def _parse_quantized(data: bytes):
    magic, bits, group_size, count = struct.unpack_from("<4s3I", data)
    if magic != _MAGIC:
        raise InvalidInputError("not a quantized checkpoint")
    spec = QuantGroupSpec(bits, group_size)
    offset = struct.calcsize("<4s3I")
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        (n_groups,) = struct.unpack_from("<I", data, offset)
        offset += 4
        n_codes = n_groups * group_size
        n_bytes = n_codes if bits > 4 else (n_codes + 1) // 2
        codes = _unpack_codes(data[offset : offset + n_bytes], n_codes, bits).reshape(n_groups, group_size)
        offset += n_bytes
        scales = np.frombuffer(data, dtype="<f8", count=n_groups, offset=offset).astype(np.float64)
        offset += 8 * n_groups
        zeros = np.frombuffer(data, dtype="<f8", count=n_groups, offset=offset).astype(np.float64)
        offset += 8 * n_groups
        if codes.size != n_codes or scales.size != n_groups or zeros.size != n_groups:
            raise ValueError("short read")
        tensors.append(QuantizedTensor(codes, scales, zeros, tuple(shape), spec))
    return spec, tensors, offset


def save_substitute_layers(layers: list[SubstituteLayer], path, spec: QuantGroupSpec) -> None:
    tensors = [layer.quantized[name] for layer in layers for name in LayerWeights.MATRICES]
    save_quantized(tensors, path, spec)
