"""``specoffload`` command line.

Every scenario key is also a flag: ``draft.depth`` is ``--draft.depth``, and
multi-word keys take either spelling (``--budget.vram-bytes`` or
``--budget.vram_bytes``). Flags override ``--config FILE``. On failure one JSON
object goes to stderr and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .bench import (emit_report, load_model, render_report, run_ablation, run_scenario, run_sweep,
                    scenario_placement, scenario_prompts, scenario_sizes)
from .config import SCHEMA, ScenarioConfig, parse_config
from .drafter import DraftParams
from .errors import ConfigError, SpecOffloadError
from .kvtree import SharedKVCache, prefill_chunked
from .offsim import (ChainAcceptance, DepthCosts, draft_forward_time, event_oracle, schedule_pipeline,
                     simulate_verify_pipeline, sweep_depth)
from .placement import LayerPlacement, build_draft_view
from .quant import build_substitute_layer, dequantize, save_substitute_layers
from .tinyformer import LayerWeights, init_random, save_weights
from .verifier import ar_decode, decode

EXIT_USAGE = 2
EXIT_FAILURE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("scenario keys")
    group.add_argument("--config", metavar="FILE", help="scenario document (key = value lines)")
    group.add_argument("--seed", help="sets model.seed, gen.seed and prompt.seed unless given")
    group.add_argument("--out", help="output path (output.path)")
    group.add_argument("--format", choices=("csv", "jsonl"), help="report format (output.format)")
    for key, (conv, default) in SCHEMA.items():
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        kwargs = {"dest": f"key:{key}", "metavar": "V", "help": f"default {default!r}"}
        if isinstance(default, bool):
            kwargs.update(nargs="?", const="true")
        group.add_argument(*names, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specoffload", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="decode the prompt set and report one row")
    gen.add_argument("--print-tokens", action="store_true", help="print generated token ids per prompt")
    sub.add_parser("ablate", help="cumulative component ladder")
    sd = sub.add_parser("sweep-depth", help="speedup versus draft depth")
    sd.add_argument("--depths", default="1,2,4,8,16,32,48", help="comma list or lo:hi[:step]")
    sd.add_argument("--accept-prob", type=float,
                    help="analytic mode: per-step acceptance probability of a chain model")
    sd.add_argument("--draft-ratio", type=float, help="analytic mode: t_draft / t_target")
    sd.add_argument("--gamma", type=float, help="analytic mode: fixed verification cost ratio")
    st = sub.add_parser("sweep-temp", help="tau and speedup versus sharpening temperature")
    st.add_argument("--temps", default="0.1,0.2,0.5,1.0", help="comma list of sharpening temperatures")
    sim = sub.add_parser("simulate", help="timeline of one verification pass")
    sim.add_argument("--tokens", type=int, help="tokens in flight (default: full tree)")
    q = sub.add_parser("quantize", help="write substitute layers for every target layer")
    q.add_argument("--weights-out", help="also save the full-precision target checkpoint here")
    sub.add_parser("selftest", help="quick end-to-end checks")
    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def config_from_args(args) -> ScenarioConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {key[4:]: value for key, value in vars(args).items() if key.startswith("key:") and value is not None}
    if args.seed is not None:
        for key in ("model.seed", "gen.seed", "prompt.seed"):
            overrides.setdefault(key, args.seed)
    if args.out is not None:
        overrides["output.path"] = args.out
    if args.format is not None:
        overrides["output.format"] = args.format
    return parse_config(text, overrides)


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _report(rows, cfg: ScenarioConfig) -> None:
    if cfg["output.path"]:
        emit_report(rows, cfg["output.format"], cfg["output.path"])
    else:
        sys.stdout.write(render_report(rows, cfg["output.format"]))


def _parse_list(text: str, conv):
    text = text.strip()
    try:
        if ":" in text:
            parts = [int(x) for x in text.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            return list(range(lo, hi + 1, step))
        return [conv(x) for x in text.split(",") if x.strip()]
    except (ValueError, IndexError):
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_gen(args, cfg):
    result = run_scenario(cfg)
    if args.print_tokens:
        # Keep stdout clean for the report when it is not going to a file.
        stream = sys.stdout if cfg["output.path"] else sys.stderr
        for i, out in enumerate(result.outputs):
            print(f"prompt {i}: " + " ".join(map(str, out)), file=stream)
    _report([result.row], cfg)


def cmd_ablate(args, cfg):
    _report([r.row for r in run_ablation(cfg)], cfg)


def cmd_sweep_depth(args, cfg):
    depths = _parse_list(args.depths, int)
    if args.accept_prob is None:
        _report([r.row for r in run_sweep(cfg, "draft.depth", depths)], cfg)
        return
    k = cfg["draft.top_k"]
    if args.draft_ratio is not None:
        costs = DepthCosts(1.0, args.draft_ratio)
    else:
        # Price target and draft passes with the scenario's own simulator.
        model_cfg = cfg.model
        sizes = scenario_sizes(cfg, model_cfg, 1, 1)
        placement = scenario_placement(cfg, model_cfg, sizes, subspec_mode=True)
        cost = cfg.cost(sizes.full_layer_bytes)
        t_target, _ = simulate_verify_pipeline(placement, cost, 1)
        costs = DepthCosts(t_target, draft_forward_time(model_cfg.num_layers, cost, k),
                           lambda n: simulate_verify_pipeline(placement, cost, n)[0])
    result = sweep_depth(costs, ChainAcceptance(args.accept_prob), depths, k, gamma=args.gamma)
    _write(result.to_csv_text(), cfg["output.path"])
    print(f"best_depth={result.best_depth}", file=sys.stderr)


def cmd_sweep_temp(args, cfg):
    temps = _parse_list(args.temps, float)
    cfg = cfg.with_overrides({"toggle.sharpening": True})
    _report([r.row for r in run_sweep(cfg, "draft.sharpen_temperature", temps)], cfg)


def cmd_simulate(args, cfg):
    model_cfg = cfg.model
    params = cfg.draft
    subspec = cfg["draft.mode"] == "subspec"
    tokens = args.tokens if args.tokens is not None else params.tree_size
    sizes = scenario_sizes(cfg, model_cfg, tokens, 1 if cfg["toggle.shared_kv"] else 2)
    placement = scenario_placement(cfg, model_cfg, sizes, subspec_mode=subspec)
    cost = cfg.cost(sizes.full_layer_bytes)
    overlap = cfg["toggle.async_transfer"]
    duration, timeline = simulate_verify_pipeline(placement, cost, tokens, overlap=overlap)
    serial, _ = simulate_verify_pipeline(placement, cost, tokens, overlap=False)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stream", "label", "start_s", "end_s"])
    for e in timeline.events:
        writer.writerow([e.stream, e.label, repr(e.start), repr(e.end)])
    _write(buf.getvalue(), cfg["output.path"])
    print(f"resident={placement.resident_count} offloaded={len(placement.offloaded)} tokens={tokens} "
          f"duration_s={duration!r} serial_s={serial!r}", file=sys.stderr)


def cmd_quantize(args, cfg):
    if not cfg["output.path"]:
        raise ConfigError("quantize needs --out", field="output.path")
    weights = load_model(cfg)
    spec = cfg.quant
    subs = [build_substitute_layer(layer, spec) for layer in weights.layers]
    save_substitute_layers(subs, cfg["output.path"], spec)
    if args.weights_out:
        save_weights(weights, args.weights_out)
    worst = 0.0
    for sub, layer in zip(subs, weights.layers):
        for name in LayerWeights.MATRICES:
            q = sub.quantized[name]
            err = np.abs(dequantize(q) - getattr(layer, name)) / q.element_scales()
            worst = max(worst, float(err.max()))
    size = Path(cfg["output.path"]).stat().st_size
    print(f"layers={len(subs)} bits={spec.bits} group_size={spec.group_size} file_bytes={size} "
          f"max_error_over_scale={worst!r}")


def _selftest_checks(cfg: ScenarioConfig):
    model_cfg = cfg.model
    weights = init_random(model_cfg, cfg["model.seed"])
    prompts = scenario_prompts(cfg, model_cfg.vocab_size)[:3]
    draft = build_draft_view(weights, LayerPlacement(model_cfg.num_layers, model_cfg.num_layers // 2), cfg.quant)
    params = DraftParams(4, 2, 0.2)

    def lossless():
        return all(decode(weights, draft, p, params, 0.0, 12)[0] == ar_decode(weights, p, 12) for p in prompts)

    def prefill():
        p = prompts[0]
        ref = SharedKVCache.for_config(model_cfg)
        prefill_chunked(weights, p, len(p), ref)
        for chunk in (1, 7):
            c = SharedKVCache.for_config(model_cfg)
            prefill_chunked(weights, p, chunk, c)
            if not np.array_equal(c.keys[:, : len(p)], ref.keys[:, : len(p)]):
                return False
        return True

    def pipeline():
        rng = random.Random(cfg["model.seed"])
        for _ in range(50):
            n = rng.randint(0, 16)
            r = rng.randint(0, n)
            comp = [rng.random() for _ in range(n)]
            tr = [None if i < r else rng.random() for i in range(n)]
            if schedule_pipeline(comp, tr)[0] != event_oracle(comp, tr):
                return False
        return True

    yield "greedy_lossless", lossless
    yield "chunked_prefill", prefill
    yield "pipeline_oracle", pipeline


def cmd_selftest(args, cfg):
    print(f"backend={kernels.BACKEND}")
    failed = 0
    for name, check in _selftest_checks(cfg):
        ok = bool(check())
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if failed:
        raise SpecOffloadError(f"{failed} self-test check(s) failed")


COMMANDS = {
    "gen": cmd_gen,
    "ablate": cmd_ablate,
    "sweep-depth": cmd_sweep_depth,
    "sweep-temp": cmd_sweep_temp,
    "simulate": cmd_simulate,
    "quantize": cmd_quantize,
    "selftest": cmd_selftest,
}


def _error_line(exc: BaseException, kind: str) -> str:
    payload = {"error": kind, "message": str(exc)}
    for attr in ("field", "line"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    return json.dumps(payload)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(_error_line(exc, exc.kind), file=sys.stderr)
        return EXIT_USAGE
    except SpecOffloadError as exc:
        print(_error_line(exc, exc.kind), file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(_error_line(exc, "io"), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
