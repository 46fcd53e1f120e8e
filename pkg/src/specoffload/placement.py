"""VRAM accounting, resident-layer planning and the draft model's weight view."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .errors import InfeasibleBudgetError, InvalidInputError
from .quant import QuantGroupSpec, SubstituteLayer, build_substitute_layer, quantized_bytes
from .tinyformer import LayerWeights, ModelConfig, ModelWeights


@dataclass(frozen=True)
class MemoryBudget:
    vram_bytes: int

    def __post_init__(self):
        if self.vram_bytes <= 0:
            raise InvalidInputError("vram_bytes must be positive")


@dataclass(frozen=True)
class SizeModel:
    """Byte sizes of every component the footprint sums over.

    ``buffer_slots`` is how many offloaded layers the transfer buffer holds at
    once; two means one layer computing while the next one loads.
    """

    full_layer_bytes: float
    substitute_layer_bytes: float
    kv_cache_bytes: float
    embed_head_bytes: float
    activation_bytes: float
    buffer_slots: int = 2

    def __post_init__(self):
        values = (self.full_layer_bytes, self.substitute_layer_bytes, self.kv_cache_bytes,
                  self.embed_head_bytes, self.activation_bytes)
        if any(v < 0 for v in values):
            raise InvalidInputError("sizes must be non-negative")
        if self.full_layer_bytes and not self.substitute_layer_bytes < self.full_layer_bytes:
            raise InvalidInputError("substitute layers must be smaller than full layers")

    @classmethod
    def from_config(
        cls,
        config: ModelConfig,
        quant: QuantGroupSpec = QuantGroupSpec(),
        *,
        bytes_per_weight: int = 2,
        tokens_in_flight: int = 256,
        kv_copies: int = 1,
        buffer_slots: int = 2,
        metadata_bytes_per_group: int = 4,
    ) -> "SizeModel":
        """Derive sizes for ``config``.

        Full layers cost ``bytes_per_weight`` per parameter; substitutes pay
        ``bits/8`` per matrix element plus group metadata, with norm gains at
        full precision. The KV-cache holds K and V for every layer at
        ``max_context`` (``kv_copies=2`` models a separate draft cache).
        Activations are ``tokens_in_flight * (4*hidden + 2*ffn)`` values.
        """
        h, f = config.hidden_dim, config.ffn_dim
        matrices = [h * h] * 4 + [h * f] * 3
        norms = 2 * h
        full = (sum(matrices) + norms) * bytes_per_weight
        sub = sum(quantized_bytes(n, quant, metadata_bytes_per_group) for n in matrices) + norms * bytes_per_weight
        kv = kv_copies * 2 * config.num_layers * config.max_context * h * bytes_per_weight
        embed_head = (2 * config.vocab_size * h + h) * bytes_per_weight
        act = tokens_in_flight * (4 * h + 2 * f) * bytes_per_weight
        return cls(full, sub, kv, embed_head, act, buffer_slots)


@dataclass(frozen=True)
class LayerPlacement:
    num_layers: int
    resident_count: int

    def __post_init__(self):
        if not 0 <= self.resident_count <= self.num_layers:
            raise InvalidInputError("resident_count must be within [0, num_layers]")

    @property
    def resident(self) -> tuple[int, ...]:
        return tuple(range(self.resident_count))

    @property
    def offloaded(self) -> tuple[int, ...]:
        return tuple(range(self.resident_count, self.num_layers))

    def is_resident(self, layer: int) -> bool:
        return layer < self.resident_count


def footprint_components(config: ModelConfig, placement: LayerPlacement, sizes: SizeModel,
                         subspec_mode: bool) -> dict[str, float]:
    n_off = len(placement.offloaded)
    return {
        "embed_head": sizes.embed_head_bytes,
        "resident_layers": placement.resident_count * sizes.full_layer_bytes,
        "substitutes": config.num_layers * sizes.substitute_layer_bytes if subspec_mode else 0.0,
        "kv_cache": sizes.kv_cache_bytes,
        "activations": sizes.activation_bytes,
        "transfer_buffer": min(sizes.buffer_slots, n_off) * sizes.full_layer_bytes,
    }


def memory_footprint(config: ModelConfig, placement: LayerPlacement, sizes: SizeModel,
                     subspec_mode: bool) -> float:
    """Total bytes on the GPU. With ``subspec_mode`` every layer keeps a substitute."""
    return sum(footprint_components(config, placement, sizes, subspec_mode).values())


def plan_placement(config: ModelConfig, budget: MemoryBudget, sizes: SizeModel,
                   subspec_mode: bool) -> LayerPlacement:
    """Longest resident prefix whose footprint fits ``budget``."""
    n = config.num_layers
    minimum = memory_footprint(config, LayerPlacement(n, 0), sizes, subspec_mode)
    if minimum > budget.vram_bytes:
        raise InfeasibleBudgetError(
            f"budget of {budget.vram_bytes} bytes is below the minimum footprint of {minimum:.0f} bytes"
        )
    best = 0
    for r in range(1, n + 1):
        if memory_footprint(config, LayerPlacement(n, r), sizes, subspec_mode) <= budget.vram_bytes:
            best = r
    return LayerPlacement(n, best)


def placement_report(config: ModelConfig, budget: MemoryBudget, placement: LayerPlacement,
                     sizes: SizeModel, subspec_mode: bool) -> str:
    lines = [f"budget={budget.vram_bytes}", f"resident_count={placement.resident_count}",
             f"offloaded_count={len(placement.offloaded)}"]
    parts = footprint_components(config, placement, sizes, subspec_mode)
    for name, value in parts.items():
        lines.append(f"footprint_bytes.{name}={value:.0f}")
    lines.append(f"footprint_bytes.total={sum(parts.values()):.0f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class Shared:
    layer: LayerWeights


@dataclass(frozen=True, eq=False)
class Substitute:
    layer: SubstituteLayer


LayerSource = Union[Shared, Substitute]


class DraftModelView:
    """Draft weights: resident target layers by reference, substitutes elsewhere.

    Embedding, final norm and head are the target's own arrays (always
    GPU-resident).
    """

    def __init__(self, target: ModelWeights, sources: list[LayerSource]):
        if len(sources) != target.config.num_layers:
            raise InvalidInputError("one source per layer required")
        self.target = target
        self.sources = list(sources)
        self.config = target.config
        self.embedding = target.embedding
        self.final_norm = target.final_norm
        self.head = target.head

    def layer(self, index: int) -> LayerWeights:
        src = self.sources[index]
        return src.layer if isinstance(src, Shared) else src.layer.weights

    @property
    def shared_count(self) -> int:
        return sum(isinstance(s, Shared) for s in self.sources)

    def describe(self) -> list[str]:
        return ["shared" if isinstance(s, Shared) else f"substitute:{s.layer.spec.bits}bit" for s in self.sources]


def build_draft_view(target: ModelWeights, placement: LayerPlacement,
                     spec: QuantGroupSpec = QuantGroupSpec()) -> DraftModelView:
    if placement.num_layers != target.config.num_layers:
        raise InvalidInputError("placement does not match the model")
    sources: list[LayerSource] = []
    for i, layer in enumerate(target.layers):
        if placement.is_resident(i):
            sources.append(Shared(layer))
        else:
            sources.append(Substitute(build_substitute_layer(layer, spec)))
    return DraftModelView(target, sources)


def self_draft_view(target: ModelWeights) -> DraftModelView:
    """Every layer shared: the draft is the target itself."""
    return DraftModelView(target, [Shared(layer) for layer in target.layers])
