"""Acceptance criteria, one test each.

Every test records a ``CRITERION N: PASS|FAIL ...`` line; the lines are
printed in the terminal summary. Run this file directly to see them without
pytest.
"""

import random
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (critical_path, enumerate_tree, exact_sequence_distribution, ref_forward,  # noqa: E402
                     softmax)
from specoffload.drafter import DraftParams, expand_tree, flatten_tree, grow_tree  # noqa: E402
from specoffload.kvtree import SharedKVCache, prefill_chunked  # noqa: E402
from specoffload.offsim import (ChainAcceptance, CostModel, DepthCosts, SpeedupInputs, analytic_ar_time,  # noqa: E402
                                analytic_sd_time, analytic_speedup, balanced_speedup, event_oracle, is_unimodal,
                                schedule_pipeline, simulate_sd_iteration, simulate_verify_pipeline, sweep_depth)
from specoffload.placement import LayerPlacement, build_draft_view, self_draft_view  # noqa: E402
from specoffload.quant import QuantGroupSpec, dequantize, quantize  # noqa: E402
from specoffload.tinyformer import (ModelConfig, forward_sequential, forward_tree, init_random,  # noqa: E402
                                    tempered_softmax)
from specoffload.verifier import accept_walk, ar_decode, decode, iteration_rng, measure_tau  # noqa: E402

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # running as a script
    ACCEPTANCE_LINES = []

TOY = ModelConfig(num_layers=8, hidden_dim=64, num_heads=4, ffn_dim=128, vocab_size=256)  # as the toy fixture


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------

def test_criterion_1_greedy_lossless(toy):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    views = {}
    cases = mismatches = 0
    for depth in (1, 4, 16, 48):
        for k in (1, 2, 6):
            for bits in (4, 8):
                for _ in range(9):
                    r = int(rng.integers(0, TOY.num_layers))
                    if (bits, r) not in views:
                        views[(bits, r)] = build_draft_view(toy, LayerPlacement(TOY.num_layers, r),
                                                            QuantGroupSpec(bits, 64))
                    prompt = rng.integers(0, TOY.vocab_size, int(rng.integers(1, 17))).tolist()
                    out, _ = decode(toy, views[(bits, r)], prompt, DraftParams(depth, k, 0.2), 0.0, 10,
                                    seed=int(rng.integers(1 << 30)))
                    cases += 1
                    mismatches += out != ar_decode(toy, prompt, 10)
    elapsed = time.perf_counter() - start
    record(1, cases >= 200 and mismatches == 0 and elapsed < 120,
           f"{cases} prompt x config cases, {mismatches} mismatches vs AR decoding, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_stochastic_distribution():
    start = time.perf_counter()
    temperature, horizon, n_samples = 0.6, 2, 200_000
    cfg = ModelConfig(2, 16, 2, 32, 5)
    target = init_random(cfg, 0)
    draft = build_draft_view(target, LayerPlacement(2, 0))
    params = DraftParams(2, 2, 0.2)
    prompt = [1, 3, 0, 2]

    # The trees and target probabilities of an iteration depend only on the
    # committed context, so they are computed once per context and the
    # acceptance walk is replayed with each seed's PRNG stream.
    def iteration(committed, root):
        cache = SharedKVCache.for_config(cfg)
        prefill_chunked(target, committed, 256, cache)
        tree = expand_tree(draft, cache, root, params)
        tokens, parents, positions = flatten_tree(tree, cache.committed_len, include_root=True)
        cache.clear_speculative()
        logits = forward_tree(target, tokens, parents, positions, cache)
        return tree, [tempered_softmax(row, temperature) for row in logits]

    first = iteration(prompt[:-1], prompt[-1])
    second = {x: iteration(prompt, x) for x in range(cfg.vocab_size)}

    def sample(seed):
        tree, probs = first
        out = accept_walk(tree, probs.__getitem__, iteration_rng(seed, 0)).emitted
        if len(out) < horizon:
            tree, probs = second[out[0]]
            out = out + accept_walk(tree, probs.__getitem__, iteration_rng(seed, 1)).emitted
        return tuple(out[:horizon])

    replay_ok = all(list(sample(s)) == decode(target, draft, prompt, params, temperature, horizon, seed=s)[0]
                    for s in range(200))
    counts = {}
    for s in range(n_samples):
        o = sample(s)
        counts[o] = counts.get(o, 0) + 1
    exact = exact_sequence_distribution(lambda ctx: softmax(ref_forward(target, list(ctx))[-1], temperature),
                                        prompt, horizon)
    tv = 0.5 * sum(abs(counts.get(seq, 0) / n_samples - p) for seq, p in exact.items())
    elapsed = time.perf_counter() - start
    record(2, replay_ok and len(exact) == 25 and tv < 0.02 and elapsed < 120,
           f"TV={tv:.4f} over {n_samples} decodes (25 outcomes), replay matches decode: {replay_ok}, "
           f"{elapsed:.1f}s")


# 3 -------------------------------------------------------------------------

def test_criterion_3_speedup_identity():
    rng = random.Random(3)
    worst = 0.0
    for _ in range(10_000):
        depth = rng.randint(1, 64)
        t_target = rng.uniform(1e-3, 1.0)
        inputs = SpeedupInputs(rng.uniform(1, 1e4), t_target, rng.uniform(0, t_target), depth,
                               rng.uniform(1.0, 2.0), rng.uniform(1.0, depth + 1))
        ratio = analytic_ar_time(inputs.n_tokens, inputs.t_target) / analytic_sd_time(inputs)
        worst = max(worst, abs(analytic_speedup(inputs) - ratio))
    record(3, worst <= 1e-12, f"max |speedup - T_ar/T_sd| = {worst:.2e} over 10000 tuples")


# 4 -------------------------------------------------------------------------

def _balanced_sim_speedup(tau, gamma, placement, base_cost, tree_tokens, depth):
    """Simulated speedup with per-token compute tuned so the tree pass costs ``gamma`` target passes."""
    def cost(per_token):
        return CostModel(base_cost.compute_base_s, per_token, base_cost.layer_bytes,
                         base_cost.bandwidth_bytes_per_s, base_cost.transfer_latency_s, base_cost.buffer_slots)

    def sim_gamma(per_token):
        c = cost(per_token)
        return simulate_verify_pipeline(placement, c, tree_tokens)[0] / simulate_verify_pipeline(placement, c, 1)[0]

    lo, hi = 0.0, 1e-3
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if sim_gamma(mid) < gamma else (lo, mid)
    c = cost(hi)
    t_target = simulate_verify_pipeline(placement, c, 1)[0]
    verify = simulate_verify_pipeline(placement, c, tree_tokens)[0]
    t_draft = verify / depth  # balanced: speculation time equals verification time
    iteration_s = depth * t_draft + verify
    return tau * t_target / iteration_s


def test_criterion_4_balanced_band():
    tau, measured = 27.08, 9.15
    gammas = np.linspace(1.0, 1.5, 11)
    predicted = [balanced_speedup(tau, g) for g in gammas]
    lo, hi = min(predicted), max(predicted)
    band_ok = round(lo, 1) == 9.0 and round(hi, 1) == 13.5 and lo <= measured <= hi
    depth, k = 48, 6
    placement = LayerPlacement(8, 3)
    base = CostModel(20e-6, 0.0, 82176, 1.25e8, 10e-6, 2)
    simulated = [_balanced_sim_speedup(tau, g, placement, base, 1 + k * depth, depth) for g in gammas]
    rel = max(abs(s - p) / p for s, p in zip(simulated, predicted))
    sim_lo, sim_hi = min(simulated), max(simulated)
    record(4, band_ok and rel <= 0.05 and sim_lo <= measured <= sim_hi,
           f"analytic band [{lo:.2f}, {hi:.2f}] contains {measured}; simulated band [{sim_lo:.2f}, {sim_hi:.2f}], "
           f"max relative deviation {rel:.2e}")


# 5 -------------------------------------------------------------------------

def test_criterion_5_sharpening_trend(toy):
    from specoffload.bench import synthetic_prompts
    view = self_draft_view(toy)
    prompts = synthetic_prompts(TOY.vocab_size, 100, 8, 1)
    sharp, flat = [], []
    for p in prompts:
        sharp.append(measure_tau(decode(toy, view, p, DraftParams(8, 6, 0.2), 0.0, 24)[1]))
        flat.append(measure_tau(decode(toy, view, p, DraftParams(8, 6, 1.0), 0.0, 24)[1]))
    sharp, flat = np.array(sharp), np.array(flat)
    strict = float((sharp > flat).mean())
    record(5, sharp.mean() >= flat.mean() and strict >= 0.6,
           f"mean tau {sharp.mean():.3f} (T=0.2) vs {flat.mean():.3f} (T=1.0); strictly greater on "
           f"{strict:.0%} of {len(prompts)} prompts")


# 6 -------------------------------------------------------------------------

def test_criterion_6_full_acceptance(toy):
    view = self_draft_view(toy)
    rng = np.random.default_rng(6)
    checked = bad = 0
    for depth in (1, 4, 12):
        for _ in range(4):
            prompt = rng.integers(0, TOY.vocab_size, 6).tolist()
            _, trace = decode(toy, view, prompt, DraftParams(depth, 3, 0.01), 0.0, 5 * (depth + 1))
            for n in trace.tokens_emitted[:-1]:
                checked += 1
                bad += n != depth + 1
    record(6, checked > 0 and bad == 0, f"{checked} non-terminal iterations, {bad} with tau != D+1")


# 7 -------------------------------------------------------------------------

def test_criterion_7_cache_exactness(toy):
    rng = np.random.default_rng(7)
    iterations = failures = 0

    def observer(prompt):
        def check(it, cache, out):
            nonlocal iterations, failures
            ref = SharedKVCache.for_config(TOY)
            forward_sequential(toy, prompt + out[:-1], ref)
            k, v = cache.snapshot()
            rk, rv = ref.snapshot()
            iterations += 1
            failures += not (np.array_equal(k, rk) and np.array_equal(v, rv))
        return check

    view = build_draft_view(toy, LayerPlacement(TOY.num_layers, 2))
    for depth, k, temp, chunk in [(4, 2, 0.0, 256), (8, 6, 0.8, 7), (3, 1, 0.0, 1), (16, 3, 1.0, 5)]:
        for n in (1, 5, 30):
            prompt = rng.integers(0, TOY.vocab_size, n).tolist()
            decode(toy, view, prompt, DraftParams(depth, k, 0.2), temp, 20, seed=n, chunk_size=chunk,
                   observer=observer(prompt))

    prefill_bad = 0
    prefill_cases = 0
    for n in (1, 10, 300):
        prompt = rng.integers(0, TOY.vocab_size, n).tolist()
        ref = SharedKVCache.for_config(TOY)
        ref_logits = forward_sequential(toy, prompt, ref)
        for chunk in (1, 7, 256, n):
            cache = SharedKVCache.for_config(TOY)
            logits = prefill_chunked(toy, prompt, chunk, cache)
            prefill_cases += 1
            prefill_bad += not (np.array_equal(cache.keys, ref.keys) and np.array_equal(cache.values, ref.values)
                                and np.array_equal(logits, ref_logits))
    record(7, iterations > 0 and failures == 0 and prefill_bad == 0,
           f"{iterations} iterations checked against AR replay ({failures} differ); "
           f"{prefill_cases} chunked prefills ({prefill_bad} differ)")


# 8 -------------------------------------------------------------------------

def test_criterion_8_quantization_bound():
    rng = np.random.default_rng(8)
    violations = not_idempotent = 0
    worst = 0.0
    for i in range(1000):
        bits = int(rng.integers(2, 9))
        gs = int(rng.choice([1, 7, 32, 64, 128]))
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 130)))
        kind = i % 4
        if kind == 0:
            x = rng.standard_normal(shape)
        elif kind == 1:
            x = rng.uniform(-1e3, 1e3, shape)
        elif kind == 2:
            x = rng.standard_cauchy(shape)
        else:
            x = np.repeat(rng.standard_normal((shape[0], 1)), shape[1], axis=1)  # constant rows
        spec = QuantGroupSpec(bits, gs)
        q = quantize(x, spec)
        err = np.abs(dequantize(q) - x)
        half = q.element_scales() / 2
        violations += int((err > half).sum())
        worst = max(worst, float((err / half).max()))
        q2 = quantize(dequantize(q), spec)
        not_idempotent += not np.array_equal(q.flat_codes(), q2.flat_codes())
    record(8, violations == 0 and not_idempotent == 0,
           f"1000 tensors: {violations} elements above scale/2 (max error/(scale/2) = {worst:.6f}); "
           f"{not_idempotent} not idempotent")


# 9 -------------------------------------------------------------------------

def test_criterion_9_tree_selection():
    rng = np.random.default_rng(9)
    models = {}
    mismatches = 0
    for _ in range(500):
        vocab = int(rng.integers(2, 33))
        k = int(rng.integers(1, min(4, vocab) + 1))
        depth = int(rng.integers(1, 7))
        inv_t = int(rng.choice([1, 2, 4, 5]))
        if vocab not in models:
            w = init_random(ModelConfig(2, 16, 2, 32, vocab, max_context=64), vocab)
            models[vocab] = (w, build_draft_view(w, LayerPlacement(2, int(rng.integers(0, 3)))))
        _, view = models[vocab]
        ctx = rng.integers(0, vocab, int(rng.integers(1, 6))).tolist()
        root = int(rng.integers(0, vocab))
        cache = SharedKVCache(2, 16, 64)
        forward_sequential(view, ctx, cache)
        tree = expand_tree(view, cache, root, DraftParams(depth, k, 1.0 / inv_t))

        def dist_of(path):
            logits = forward_sequential(view, ctx + list(path), SharedKVCache(2, 16, 64))
            return [Fraction(p) for p in tempered_softmax(logits, 1.0)]

        expected = enumerate_tree(dist_of, root, vocab, k, depth, inv_t)
        got = [[(tree.parents[i], tree.tokens[i]) for i in tree.level(d)] for d in range(1, depth + 1)]
        mismatches += got != expected

    table = {(): [0.45, 0.55], (0,): [0.95, 0.05], (1,): [0.6, 0.4]}

    def two_branch(t):
        paths = {}

        def step(nodes, tokens, parents, depths):
            out = []
            for node, tok, par in zip(nodes, tokens, parents):
                paths[node] = () if par == -1 else paths[par] + (tok,)
                out.append(table[paths[node]])
            return np.array(out)

        tree = grow_tree(step, 0, DraftParams(2, 2, t), 2)
        best = tree.level(2)[0]
        return tree.tokens[tree.parents[best]], float(np.exp(tree.scores[best]))

    false_tok, false_score = two_branch(1.0)
    true_tok, true_score = two_branch(0.2)
    flip = (false_tok == 0 and abs(false_score - 0.4275) < 1e-12 and true_tok == 1
            and abs(true_score - 0.647) < 5e-4)
    record(9, mismatches == 0 and flip,
           f"500 instances, {mismatches} differ from exhaustive enumeration; two-branch scenario: unsharpened best "
           f"path via x ({false_score:.4f}), T=0.2 via y ({true_score:.3f})")


# 10 ------------------------------------------------------------------------

def test_criterion_10_pipeline_oracle():
    rng = random.Random(10)
    mismatch = serial_bad = not_shorter = degenerate = 0
    for _ in range(500):
        layers = rng.randint(1, 64)
        resident = rng.randint(0, layers)
        # Dyadic values keep every sum exact, so equalities can be tested with ==.
        cost = CostModel(rng.randint(1, 4096) / 1024, rng.randint(0, 64) / 4096, rng.randint(1, 1 << 20),
                         1 << rng.randint(10, 20), rng.randint(0, 64) / 1024, rng.randint(1, 3))
        tokens = rng.randint(1, 300)
        placement = LayerPlacement(layers, resident)
        duration, _ = simulate_verify_pipeline(placement, cost, tokens)
        c, x = cost.compute_time(tokens), cost.transfer_time()
        compute = [c] * layers
        transfer = [None if placement.is_resident(i) else x for i in range(layers)]
        mismatch += duration != event_oracle(compute, transfer, buffer_slots=cost.buffer_slots)
        mismatch += duration != critical_path(compute, transfer, True, cost.buffer_slots)
        # heterogeneous layers through the same scheduler
        hc = [rng.randint(0, 4096) / 1024 for _ in range(layers)]
        ht = [None if i < resident else rng.randint(1, 4096) / 1024 for i in range(layers)]
        window = rng.choice([0.0, rng.randint(1, 4096) / 256])
        mismatch += (schedule_pipeline(hc, ht, buffer_slots=cost.buffer_slots, prefetch_window=window)[0]
                     != event_oracle(hc, ht, buffer_slots=cost.buffer_slots, prefetch_window=window))
        serial, _ = simulate_verify_pipeline(placement, cost, tokens, overlap=False)
        serial_bad += serial != sum(compute) + sum(t for t in transfer if t is not None)
        if placement.offloaded:
            # strictness is a property of the double-buffered design; one slot serialises by construction
            double = CostModel(cost.compute_base_s, cost.compute_per_token_s, cost.layer_bytes,
                               cost.bandwidth_bytes_per_s, cost.transfer_latency_s, 2)
            depth, k = rng.randint(1, 48), rng.randint(1, 6)
            on = simulate_sd_iteration(placement, double, depth, k, async_transfer=True)
            off = simulate_sd_iteration(placement, double, depth, k, async_transfer=False)
            not_shorter += not on.total_s < off.total_s
            # Without a speculation window, a single offloaded layer at index 0 has nothing to overlap.
            if resident == 0 and layers == 1:
                degenerate += 1
            elif not (simulate_verify_pipeline(placement, double, tokens)[0]
                      < simulate_verify_pipeline(placement, double, tokens, overlap=False)[0]):
                not_shorter += 1
    record(10, mismatch == 0 and serial_bad == 0 and not_shorter == 0,
           f"500 instances: {mismatch} oracle mismatches, {serial_bad} serial-sum mismatches, "
           f"{not_shorter} cases where async is not strictly shorter ({degenerate} single-layer cases "
           f"checked only with a speculation window)")


# 11 ------------------------------------------------------------------------

def test_criterion_11_depth_sweep():
    costs = DepthCosts(1.0, 0.01)
    aligned = sweep_depth(costs, ChainAcceptance(0.98), range(1, 257), 6, gamma=1.2)
    weak = sweep_depth(costs, ChainAcceptance(0.5), range(1, 257), 6, gamma=1.2)
    ok = (is_unimodal([r.speedup for r in aligned.rows]) and aligned.best_depth >= 16
          and weak.best_depth <= 8)
    record(11, ok, f"beta=0.98 optimum D={aligned.best_depth} (unimodal: "
                   f"{is_unimodal([r.speedup for r in aligned.rows])}); beta=0.5 optimum D={weak.best_depth}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
