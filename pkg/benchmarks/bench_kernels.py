"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--no-decode]

Prints one row per kernel with the best-of-N time for each backend, then an
end-to-end greedy decode timed under each backend in a fresh interpreter.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from specoffload import kernels

DECODE_SNIPPET = """
import time
from specoffload.drafter import DraftParams
from specoffload.placement import LayerPlacement, build_draft_view
from specoffload.tinyformer import ModelConfig, init_random
from specoffload.verifier import decode
w = init_random(ModelConfig(8, 64, 4, 128, 256), 0)
view = build_draft_view(w, LayerPlacement(8, 2))
start = time.perf_counter()
for seed in range(4):
    decode(w, view, [seed, 1, 2, 3, 4, 5], DraftParams(16, 4, 0.2), 0.0, 32)
print(time.perf_counter() - start)
"""


def cases(rng):
    hidden, tree, ctx, heads = 64, 200, 600, 4
    x = rng.standard_normal((tree, hidden))
    w = rng.standard_normal((hidden, 4 * hidden))
    q = rng.standard_normal((tree, hidden))
    k = rng.standard_normal((ctx, hidden))
    mask = (rng.random((tree, ctx)) < 0.7).astype(np.uint8)
    e = rng.random((heads, tree, ctx))
    groups = rng.standard_normal((4096, 64))
    codes, scales, zeros = kernels.get_backend("python").quantize_groups(groups, 4)
    return {
        "linear 200x64 @ 64x256": lambda b: b.linear(x, w),
        "masked_scores 200x600, 4 heads": lambda b: b.masked_scores(q, k, mask, heads, 0.25),
        "weighted_values 200x600, 4 heads": lambda b: b.weighted_values(e, k, mask),
        "quantize_groups 4096x64, 4 bit": lambda b: b.quantize_groups(groups, 4),
        "dequantize_groups 4096x64": lambda b: b.dequantize_groups(codes, scales, zeros),
    }


def best_of(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-9)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def decode_time(pure):
    env = dict(os.environ)
    env.pop("SPECOFFLOAD_PURE", None)
    if pure:
        env["SPECOFFLOAD_PURE"] = "1"
    out = subprocess.run([sys.executable, "-c", DECODE_SNIPPET], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-decode", action="store_true", help="skip the end-to-end decode timing")
    args = ap.parse_args(argv)

    py = kernels.get_backend("python")
    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        print("compiled kernels are not built; rebuild with pip install -e . --no-build-isolation")
        return 1

    print(f"{'kernel':36s} {'python ms':>10s} {'compiled ms':>12s} {'ratio':>7s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        tp = best_of(lambda: fn(py), args.repeat)
        tc = best_of(lambda: fn(compiled), args.repeat)
        print(f"{name:36s} {tp * 1e3:10.3f} {tc * 1e3:12.3f} {tp / tc:7.2f}")

    if not args.no_decode:
        tp, tc = decode_time(True), decode_time(False)
        print(f"{'decode 4 prompts x 32 tokens':36s} {tp * 1e3:10.1f} {tc * 1e3:12.1f} {tp / tc:7.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
