"""Scenario configuration: a flat document of ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored; several assignments may share a
line when separated by commas. Values are integers, reals, ``true``/``false``,
``none`` or strings (optionally quoted). Every key has a default, so an empty
document is a valid scenario.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Callable, Mapping

from .drafter import DraftParams
from .errors import ConfigError, SpecOffloadError
from .offsim import CostModel
from .quant import QuantGroupSpec
from .tinyformer import ModelConfig

_NONE = ("none", "null", "")


def _to_int(raw: str) -> int:
    try:
        return int(raw.replace("_", ""), 0)
    except ValueError:
        value = float(raw)
        if not value.is_integer():
            raise
        return int(value)


def _to_float(raw: str) -> float:
    return float(raw.replace("_", ""))


def _to_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(raw)


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(raw: str):
        return None if raw.lower() in _NONE else conv(raw)

    parse.__name__ = f"optional {conv.__name__.removeprefix('_to_')}"
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return raw

    parse.__name__ = "choice"
    return parse


_TYPE_NAMES = {_to_int: "integer", _to_float: "real", _to_bool: "boolean", str: "string"}

# key -> (converter, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "model.num_layers": (_to_int, 8),
    "model.hidden_dim": (_to_int, 64),
    "model.num_heads": (_to_int, 4),
    "model.ffn_dim": (_to_int, 128),
    "model.vocab_size": (_to_int, 256),
    "model.max_context": (_to_int, 2048),
    "model.seed": (_to_int, 0),
    "model.checkpoint": (_optional(str), None),
    # none: plan as if only the minimum fits, i.e. every layer offloaded.
    "budget.vram_bytes": (_optional(_to_int), None),
    "size.bytes_per_weight": (_to_int, 2),
    "size.metadata_bytes_per_group": (_to_int, 4),
    "quant.bits": (_to_int, 4),
    "quant.group_size": (_to_int, 64),
    "draft.mode": (_choice("subspec", "self", "none"), "subspec"),
    "draft.depth": (_to_int, 48),
    "draft.top_k": (_to_int, 6),
    "draft.sharpen_temperature": (_to_float, 0.2),
    "gen.temperature": (_to_float, 0.0),
    "gen.seed": (_to_int, 0),
    "gen.max_new_tokens": (_to_int, 64),
    "gen.chunk_size": (_to_int, 256),
    "gen.eos_token": (_optional(_to_int), None),
    "toggle.shared_kv": (_to_bool, True),
    "toggle.sharpening": (_to_bool, True),
    "toggle.async_transfer": (_to_bool, True),
    "prompt.seed": (_to_int, 0),
    "prompt.count": (_to_int, 4),
    "prompt.length": (_to_int, 16),
    "prompt.file": (_optional(str), None),
    # Defaults make one toy-layer copy about 30x one layer's compute.
    "cost.compute_base_s": (_to_float, 20e-6),
    "cost.compute_per_token_s": (_to_float, 0.05e-6),
    "cost.bandwidth_bytes_per_s": (_to_float, 1.25e8),
    "cost.transfer_latency_s": (_to_float, 10e-6),
    "cost.buffer_slots": (_to_int, 2),
    "report.method": (_optional(str), None),
    "output.path": (_optional(str), None),
    "output.format": (_choice("csv", "jsonl"), "csv"),
}


def _type_name(conv) -> str:
    return _TYPE_NAMES.get(conv, conv.__name__)


def normalize_key(key: str) -> str:
    """``budget.vram-bytes`` and ``budget.vram_bytes`` name the same field."""
    return key.strip().replace("-", "_")


@dataclass(frozen=True)
class Toggles:
    shared_kv: bool = True
    sharpening: bool = True
    async_transfer: bool = True


@dataclass(frozen=True)
class PromptSource:
    seed: int
    count: int
    length: int
    file: str | None


class ScenarioConfig:
    """Validated, immutable scenario. Read fields with ``cfg["draft.depth"]``."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = {key: default for key, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            key = normalize_key(key)
            if key not in SCHEMA:
                raise ConfigError("unknown key", field=key)
            merged[key] = value
        self._values = MappingProxyType(merged)
        self._validate()

    def __getitem__(self, key: str):
        return self._values[normalize_key(key)]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def __eq__(self, other) -> bool:
        return isinstance(other, ScenarioConfig) and self._values == other._values

    def __repr__(self) -> str:
        changed = {k: v for k, v in self._values.items() if v != SCHEMA[k][1]}
        return f"ScenarioConfig({changed})"

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with ``changes`` applied; keys use ``__`` for the dot (``draft__depth``)."""
        values = self.as_dict()
        values.update({k.replace("__", "."): v for k, v in changes.items()})
        return ScenarioConfig(values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ScenarioConfig":
        values = self.as_dict()
        values.update(overrides)
        return ScenarioConfig(values)

    # typed views -------------------------------------------------------

    @property
    def model(self) -> ModelConfig:
        v = self._values
        return ModelConfig(v["model.num_layers"], v["model.hidden_dim"], v["model.num_heads"],
                           v["model.ffn_dim"], v["model.vocab_size"], v["model.max_context"])

    @property
    def quant(self) -> QuantGroupSpec:
        return QuantGroupSpec(self._values["quant.bits"], self._values["quant.group_size"])

    @property
    def draft(self) -> DraftParams:
        """Draft parameters as run: sharpening off means plain T=1 scoring."""
        v = self._values
        sharpen = v["draft.sharpen_temperature"] if v["toggle.sharpening"] else 1.0
        return DraftParams(v["draft.depth"], v["draft.top_k"], sharpen)

    @property
    def toggles(self) -> Toggles:
        v = self._values
        return Toggles(v["toggle.shared_kv"], v["toggle.sharpening"], v["toggle.async_transfer"])

    @property
    def prompts(self) -> PromptSource:
        v = self._values
        return PromptSource(v["prompt.seed"], v["prompt.count"], v["prompt.length"], v["prompt.file"])

    def cost(self, layer_bytes: float) -> CostModel:
        v = self._values
        return CostModel(v["cost.compute_base_s"], v["cost.compute_per_token_s"], layer_bytes,
                         v["cost.bandwidth_bytes_per_s"], v["cost.transfer_latency_s"], v["cost.buffer_slots"])

    def _validate(self) -> None:
        v = self._values
        for key, value in v.items():
            conv, default = SCHEMA[key]
            if value is None:
                if default is not None and conv is not None and "optional" not in conv.__name__:
                    raise ConfigError("value must not be none", field=key)
                continue
            expected = type(default) if default is not None else None
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            if expected is not None and (type(value) is not expected):
                raise ConfigError(f"expected {_type_name(conv)}, got {value!r}", field=key)
        checks = [
            ("model.num_layers", lambda: self.model),
            ("quant.bits", lambda: self.quant),
            ("draft.depth", lambda: self.draft),
            ("cost.bandwidth_bytes_per_s", lambda: self.cost(1.0)),
        ]
        for fallback_field, build in checks:
            try:
                build()
            except SpecOffloadError as exc:
                raise ConfigError(str(exc), field=_field_from_message(str(exc), fallback_field)) from exc
        positive = ("gen.max_new_tokens", "gen.chunk_size", "prompt.count", "prompt.length",
                    "size.bytes_per_weight")
        for key in positive:
            if v[key] < 1:
                raise ConfigError("must be a positive integer", field=key)
        if v["size.metadata_bytes_per_group"] < 0:
            raise ConfigError("must be non-negative", field="size.metadata_bytes_per_group")
        if not v["gen.temperature"] >= 0:
            raise ConfigError("must be non-negative", field="gen.temperature")
        if v["budget.vram_bytes"] is not None and v["budget.vram_bytes"] <= 0:
            raise ConfigError("must be positive", field="budget.vram_bytes")
        eos = v["gen.eos_token"]
        if eos is not None and not 0 <= eos < v["model.vocab_size"]:
            raise ConfigError("must be a token id of the vocabulary", field="gen.eos_token")
        if v["draft.top_k"] > v["model.vocab_size"]:
            raise ConfigError("cannot exceed model.vocab_size", field="draft.top_k")


def _field_from_message(message: str, fallback: str) -> str:
    aliases = {"hidden_dim must be divisible": "model.num_heads", "head dimension": "model.num_heads",
               "sharpen_temperature": "draft.sharpen_temperature", "top_k": "draft.top_k",
               "group_size": "quant.group_size", "bandwidth": "cost.bandwidth_bytes_per_s",
               "costs": "cost.compute_base_s", "need at least one buffer slot": "cost.buffer_slots"}
    for prefix, key in aliases.items():
        if message.startswith(prefix):
            return key
    section = fallback.split(".")[0]
    for key in SCHEMA:
        if key.startswith(section + ".") and message.startswith(key.split(".", 1)[1]):
            return key
    return fallback


def _split_assignments(line: str) -> list[str]:
    lexer = shlex.shlex(line, posix=True)
    lexer.whitespace = ","
    lexer.whitespace_split = True
    lexer.commenters = "#"
    return [part for part in lexer if part.strip()]


def convert_value(key: str, raw: str, line: int | None = None):
    key = normalize_key(key)
    if key not in SCHEMA:
        raise ConfigError("unknown key", field=key, line=line)
    conv, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        return conv(raw)
    except ValueError as exc:
        detail = str(exc) if conv.__name__ == "choice" else f"expected {_type_name(conv)}"
        raise ConfigError(f"{detail}, got {raw!r}", field=key, line=line) from None


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> ScenarioConfig:
    """Parse a scenario document; ``overrides`` (raw strings) win over the text."""
    values: dict[str, Any] = {}
    origin: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            parts = _split_assignments(line)
        except ValueError as exc:
            raise ConfigError(f"malformed line ({exc})", line=lineno) from None
        for part in parts:
            if "=" not in part:
                raise ConfigError(f"expected 'key = value', got {part.strip()!r}", line=lineno)
            key, raw = part.split("=", 1)
            key = normalize_key(key)
            if key in origin:
                raise ConfigError(f"duplicate key (first set on line {origin[key]})", field=key, line=lineno)
            values[key] = convert_value(key, raw, lineno)
            origin[key] = lineno
    for key, raw in (overrides or {}).items():
        key = normalize_key(key)
        values[key] = convert_value(key, raw)
        origin.pop(key, None)
    try:
        return ScenarioConfig(values)
    except ConfigError as exc:
        if exc.line is None and exc.field in origin:
            raise ConfigError(str(exc).split(": ", 1)[-1], field=exc.field, line=origin[exc.field]) from None
        raise


def render_config(cfg: ScenarioConfig) -> str:
    """Inverse of :func:`parse_config` for every field."""
    out = []
    for key, value in cfg.as_dict().items():
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, str):
            text = shlex.quote(value)
        else:
            text = str(value)
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"
