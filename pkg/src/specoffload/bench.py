"""End-to-end scenarios: decode a prompt set, then price it with the simulator.

Throughput is never wall-clock. Tokens per iteration (tau) come from real
decoding of the toy model; seconds per iteration come from the pipeline
simulator run on the same placement. The AR reference is plain offloading:
every layer that does not fit is streamed in serially for each token.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ScenarioConfig
from .errors import InvalidInputError
from .offsim import IterationCost, simulate_sd_iteration, simulate_verify_pipeline
from .placement import (LayerPlacement, MemoryBudget, SizeModel, build_draft_view, memory_footprint,
                        plan_placement, self_draft_view)
from .tinyformer import ModelWeights, init_random, load_weights
from .verifier import GenerationTrace, ar_decode, decode

REPORT_FIELDS = ("method", "depth", "top_k", "sharpen_t", "gen_t", "tau", "tokens_per_s", "speedup",
                 "footprint_bytes")


@dataclass(frozen=True)
class ReportRow:
    method: str
    depth: int
    top_k: int
    sharpen_t: float | None
    gen_t: float
    tau: float
    tokens_per_s: float
    speedup: float
    footprint_bytes: int


@dataclass
class ScenarioResult:
    row: ReportRow
    placement: LayerPlacement
    outputs: list[list[int]]
    traces: list[GenerationTrace] = field(default_factory=list)
    iteration: IterationCost | None = None
    ar_token_s: float = 0.0


def synthetic_prompts(vocab_size: int, count: int, length: int, seed: int) -> list[list[int]]:
    """Seeded uniform token sequences (Philox keyed by ``seed``)."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return [[int(t) for t in rng.integers(0, vocab_size, size=length)] for _ in range(count)]


def read_prompt_file(path, vocab_size: int) -> list[list[int]]:
    """One prompt per line as whitespace-separated token ids; ``#`` starts a comment."""
    prompts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError:
            raise InvalidInputError(f"{path}:{lineno}: prompt tokens must be integers") from None
        if any(not 0 <= t < vocab_size for t in ids):
            raise InvalidInputError(f"{path}:{lineno}: token id outside the vocabulary")
        prompts.append(ids)
    if not prompts:
        raise InvalidInputError(f"{path}: no prompts")
    return prompts


def load_model(cfg: ScenarioConfig) -> ModelWeights:
    """Checkpoint if configured (its own config wins), else seeded random weights."""
    if cfg["model.checkpoint"]:
        return load_weights(cfg["model.checkpoint"])
    return init_random(cfg.model, cfg["model.seed"])


def scenario_prompts(cfg: ScenarioConfig, vocab_size: int) -> list[list[int]]:
    src = cfg.prompts
    if src.file:
        return read_prompt_file(src.file, vocab_size)
    return synthetic_prompts(vocab_size, src.count, src.length, src.seed)


def scenario_sizes(cfg: ScenarioConfig, model_cfg, tokens_in_flight: int, kv_copies: int) -> SizeModel:
    return SizeModel.from_config(model_cfg, cfg.quant, bytes_per_weight=cfg["size.bytes_per_weight"],
                                 tokens_in_flight=tokens_in_flight, kv_copies=kv_copies,
                                 buffer_slots=cfg["cost.buffer_slots"],
                                 metadata_bytes_per_group=cfg["size.metadata_bytes_per_group"])


def scenario_placement(cfg: ScenarioConfig, model_cfg, sizes: SizeModel, subspec_mode: bool) -> LayerPlacement:
    budget = cfg["budget.vram_bytes"]
    if budget is None:
        # No budget: only the minimum fits. Still surfaces an infeasible minimum.
        budget = int(np.ceil(memory_footprint(model_cfg, LayerPlacement(model_cfg.num_layers, 0),
                                              sizes, subspec_mode)))
    return plan_placement(model_cfg, MemoryBudget(budget), sizes, subspec_mode)


def ar_token_time(cfg: ScenarioConfig, model_cfg) -> float:
    """Seconds per token of the baseline: AR, vanilla placement, serial copies."""
    sizes = scenario_sizes(cfg, model_cfg, 1, 1)
    placement = scenario_placement(cfg, model_cfg, sizes, subspec_mode=False)
    duration, _ = simulate_verify_pipeline(placement, cfg.cost(sizes.full_layer_bytes), 1, overlap=False)
    return duration


def _pooled_tau(traces: Sequence[GenerationTrace]) -> float:
    iterations = sum(t.iterations for t in traces)
    if not iterations:
        raise InvalidInputError("no draft/verify iterations ran")
    return sum(t.total_tokens for t in traces) / iterations


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Decode the configured prompt set and price it with the simulator."""
    weights = load_model(cfg)
    model_cfg = weights.config
    prompts = scenario_prompts(cfg, model_cfg.vocab_size)
    mode = cfg["draft.mode"]
    toggles = cfg.toggles
    gen_t = cfg["gen.temperature"]
    t_ar = ar_token_time(cfg, model_cfg)

    if mode == "none":
        sizes = scenario_sizes(cfg, model_cfg, 1, 1)
        placement = scenario_placement(cfg, model_cfg, sizes, subspec_mode=False)
        token_s, _ = simulate_verify_pipeline(placement, cfg.cost(sizes.full_layer_bytes), 1,
                                              overlap=toggles.async_transfer)
        outputs = [ar_decode(weights, p, cfg["gen.max_new_tokens"], gen_t, cfg["gen.seed"] + i,
                             chunk_size=cfg["gen.chunk_size"], eos_token=cfg["gen.eos_token"])
                   for i, p in enumerate(prompts)]
        row = ReportRow(cfg["report.method"] or "ar", 0, 0, None, gen_t, 1.0, 1.0 / token_s, t_ar / token_s,
                        int(memory_footprint(model_cfg, placement, sizes, False)))
        return ScenarioResult(row, placement, outputs, ar_token_s=t_ar)

    params = cfg.draft
    subspec = mode == "subspec"
    sizes = scenario_sizes(cfg, model_cfg, params.tree_size, 1 if toggles.shared_kv else 2)
    placement = scenario_placement(cfg, model_cfg, sizes, subspec_mode=subspec)
    cost = cfg.cost(sizes.full_layer_bytes)
    if subspec:
        draft = build_draft_view(weights, placement, cfg.quant)
        iteration = simulate_sd_iteration(placement, cost, params.depth, params.top_k,
                                          async_transfer=toggles.async_transfer)
    else:
        draft = self_draft_view(weights)
        # The self-draft streams offloaded layers for every draft pass, so the
        # copy stream is never idle during speculation.
        t_draft, _ = simulate_verify_pipeline(placement, cost, params.top_k, overlap=toggles.async_transfer)
        verify, _ = simulate_verify_pipeline(placement, cost, params.tree_size, overlap=toggles.async_transfer)
        iteration = IterationCost(params.depth * t_draft, verify)

    outputs, traces = [], []
    for i, prompt in enumerate(prompts):
        out, trace = decode(weights, draft, prompt, params, gen_t, cfg["gen.max_new_tokens"], cfg["gen.seed"] + i,
                            chunk_size=cfg["gen.chunk_size"], shared_kv=toggles.shared_kv,
                            eos_token=cfg["gen.eos_token"])
        outputs.append(out)
        traces.append(trace)
    tau = _pooled_tau(traces)
    tokens_per_s = tau / iteration.total_s
    row = ReportRow(cfg["report.method"] or ("subspec" if subspec else "self-draft"), params.depth, params.top_k,
                    params.sharpen_temperature, gen_t, tau, tokens_per_s, tokens_per_s * t_ar,
                    int(memory_footprint(model_cfg, placement, sizes, subspec)))
    return ScenarioResult(row, placement, outputs, traces, iteration, t_ar)


# Cumulative ladder: each step adds one component to the one before.
LADDER = (
    ("ar", {"draft.mode": "none", "toggle.shared_kv": False, "toggle.sharpening": False,
            "toggle.async_transfer": False}),
    ("base", {"draft.mode": "subspec", "toggle.shared_kv": False, "toggle.sharpening": False,
              "toggle.async_transfer": False}),
    ("+shared_kv", {"toggle.shared_kv": True}),
    ("+sharpening", {"toggle.sharpening": True}),
    ("+async", {"toggle.async_transfer": True}),
)


def ablation_configs(cfg: ScenarioConfig) -> list[ScenarioConfig]:
    out = []
    current = cfg
    for label, changes in LADDER:
        current = current.with_overrides({**changes, "report.method": label})
        out.append(current)
    return out


def run_ablation(cfg: ScenarioConfig) -> list[ScenarioResult]:
    return [run_scenario(c) for c in ablation_configs(cfg)]


def run_sweep(cfg: ScenarioConfig, key: str, values: Iterable) -> list[ScenarioResult]:
    """One scenario per value of ``key``; rows are labelled ``key=value``."""
    results = []
    for value in values:
        label = f"{key.split('.')[-1]}={value}"
        results.append(run_scenario(cfg.with_overrides({key: value, "report.method": label})))
    return results


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_report(rows: Sequence[ReportRow], fmt: str) -> str:
    """Report text as :func:`emit_report` writes it."""
    if not rows:
        raise InvalidInputError("a report needs at least one row")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in rows:
            writer.writerow([_cell(getattr(row, f.name)) for f in fields(ReportRow)])
        return buf.getvalue()
    if fmt == "jsonl":
        return "".join(json.dumps(asdict(row), allow_nan=False) + "\n" for row in rows)
    raise InvalidInputError(f"unknown report format {fmt!r}")


def emit_report(rows: Sequence[ReportRow], fmt: str, path) -> Path:
    """Write ``rows`` as CSV or JSON lines; identical rows give identical bytes."""
    text = render_report(rows, fmt)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path
