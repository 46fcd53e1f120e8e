"""Offloading cost model, two-stream pipeline simulator and analytic speedup.

The analytic model::

    T_ar  = N * t_target
    T_sd  = N * (D * t_draft + gamma * t_target) / tau,     1 <= tau <= D + 1
    speedup = T_ar / T_sd = tau / (D * t_draft / t_target + gamma)

The simulator schedules one forward pass over a compute stream and a copy
stream. Resident layers only compute. Offloaded layers must be copied in
first; with overlap on, the copy of the next offloaded layer runs while the
current one computes, through a buffer of ``buffer_slots`` layer regions that
are reused in turn.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import InvalidInputError
from .placement import LayerPlacement

COMPUTE = "compute"
COPY = "copy"


def analytic_ar_time(n_tokens: float, t_target: float) -> float:
    return n_tokens * t_target


@dataclass(frozen=True)
class SpeedupInputs:
    n_tokens: float
    t_target: float
    t_draft: float
    depth: float
    gamma: float
    tau: float
    # Simulated verification cost can push gamma past 2; sweeps turn this off.
    check_gamma_band: bool = True

    def __post_init__(self):
        if self.n_tokens < 0 or self.t_draft < 0 or self.depth < 0:
            raise InvalidInputError("token count, draft time and depth must be non-negative")
        if not self.t_target > 0:
            raise InvalidInputError("t_target must be positive")
        if not 1.0 <= self.tau <= self.depth + 1:
            raise InvalidInputError(f"tau={self.tau} outside [1, D+1] for D={self.depth}")
        if self.check_gamma_band and not 1.0 <= self.gamma <= 2.0:
            raise InvalidInputError(f"gamma={self.gamma} outside [1, 2]")
        if not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")


def analytic_sd_time(inputs: SpeedupInputs) -> float:
    return inputs.n_tokens * (inputs.depth * inputs.t_draft + inputs.gamma * inputs.t_target) / inputs.tau


def analytic_speedup(inputs: SpeedupInputs) -> float:
    return inputs.tau / (inputs.depth * inputs.t_draft / inputs.t_target + inputs.gamma)


def balanced_speedup(tau: float, gamma: float) -> float:
    """Speedup when speculation time equals verification time (D*t_draft = gamma*t_target)."""
    return tau / (2.0 * gamma)


def expected_tau_chain(accept_prob: float, depth: int) -> float:
    """Expected tokens per iteration when each draft step survives with ``accept_prob``.

    A parametric stand-in for sweeps, not a measured quantity.
    """
    if not 0.0 <= accept_prob <= 1.0:
        raise InvalidInputError("accept_prob must be in [0, 1]")
    if accept_prob == 1.0:
        return float(depth + 1)
    return (1.0 - accept_prob ** (depth + 1)) / (1.0 - accept_prob)


@dataclass(frozen=True)
class ChainAcceptance:
    accept_prob: float

    def tau(self, depth: int) -> float:
        return expected_tau_chain(self.accept_prob, depth)


@dataclass(frozen=True)
class CostModel:
    """Per-layer costs. Compute is ``base + per_token * tokens``."""

    compute_base_s: float
    compute_per_token_s: float
    layer_bytes: float
    bandwidth_bytes_per_s: float
    transfer_latency_s: float = 0.0
    buffer_slots: int = 2

    def __post_init__(self):
        if min(self.compute_base_s, self.compute_per_token_s, self.layer_bytes, self.transfer_latency_s) < 0:
            raise InvalidInputError("costs must be non-negative")
        if not self.bandwidth_bytes_per_s > 0:
            raise InvalidInputError("bandwidth must be positive")
        if self.buffer_slots < 1:
            raise InvalidInputError("need at least one buffer slot")

    def compute_time(self, tokens: int) -> float:
        return self.compute_base_s + self.compute_per_token_s * tokens

    def transfer_time(self) -> float:
        return self.transfer_latency_s + self.layer_bytes / self.bandwidth_bytes_per_s


@dataclass(frozen=True)
class Event:
    stream: str
    label: str
    start: float
    end: float


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)

    def stream(self, name: str) -> list[Event]:
        return [e for e in self.events if e.stream == name]

    def busy(self, name: str) -> float:
        return sum(e.end - e.start for e in self.stream(name))

    def check(self) -> None:
        """Raise if two events on one stream overlap."""
        for name in (COMPUTE, COPY):
            evs = sorted(self.stream(name), key=lambda e: e.start)
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise AssertionError(f"overlap on {name}: {a} / {b}")


def schedule_pipeline(compute: Sequence[float], transfer: Sequence[float | None], *, overlap: bool = True,
                      buffer_slots: int = 2, prefetch_window: float = 0.0) -> tuple[float, Timeline]:
    """Schedule one pass; ``transfer[i]`` is None for a resident layer.

    With ``overlap`` the copy stream opens ``prefetch_window`` seconds before
    the pass (the speculation phase), and the copy of the m-th offloaded layer
    waits for the compute of the (m - buffer_slots)-th to free its region.
    Without it every copy waits for the previous layer's compute. Returns the
    time at which the last compute ends (0 for an empty pass).
    """
    if len(compute) != len(transfer):
        raise InvalidInputError("compute and transfer must have one entry per layer")
    events: list[Event] = []
    compute_free = 0.0
    copy_free = -prefetch_window if overlap else 0.0
    offloaded_ends: list[float] = []
    for i, (c, x) in enumerate(zip(compute, transfer)):
        ready = compute_free
        if x is not None:
            if overlap:
                t_start = copy_free
                m = len(offloaded_ends)
                if m >= buffer_slots:
                    t_start = max(t_start, offloaded_ends[m - buffer_slots])
            else:
                t_start = compute_free
            t_end = t_start + x
            copy_free = t_end
            events.append(Event(COPY, f"load L{i}", t_start, t_end))
            ready = max(ready, t_end)
        end = ready + c
        events.append(Event(COMPUTE, f"layer L{i}", ready, end))
        compute_free = end
        if x is not None:
            offloaded_ends.append(end)
    return (compute_free if compute else 0.0), Timeline(events)


def simulate_verify_pipeline(placement: LayerPlacement, cost: CostModel, tokens_in_flight: int, *,
                             overlap: bool = True, prefetch_window: float = 0.0) -> tuple[float, Timeline]:
    c = cost.compute_time(tokens_in_flight)
    x = cost.transfer_time()
    compute = [c] * placement.num_layers
    transfer = [None if placement.is_resident(i) else x for i in range(placement.num_layers)]
    return schedule_pipeline(compute, transfer, overlap=overlap, buffer_slots=cost.buffer_slots,
                             prefetch_window=prefetch_window)


def event_oracle(compute: Sequence[float], transfer: Sequence[float | None], *, overlap: bool = True,
                 buffer_slots: int = 2, prefetch_window: float = 0.0) -> float:
    """Brute-force discrete-event simulation of the same pass.

    Tasks wait on explicit dependencies and on their stream; an event queue
    advances time from completion to completion. Used only to cross-check
    :func:`schedule_pipeline`.
    """
    n = len(compute)
    tasks: dict[str, dict] = {}
    off_layers = [i for i in range(n) if transfer[i] is not None]
    for i in range(n):
        deps = [f"C{i-1}"] if i else []
        if transfer[i] is not None:
            deps.append(f"T{i}")
        tasks[f"C{i}"] = {"dur": compute[i], "stream": COMPUTE, "deps": deps}
    for m, i in enumerate(off_layers):
        deps = []
        if overlap:
            if m:
                deps.append(f"T{off_layers[m-1]}")
            if m >= buffer_slots:
                deps.append(f"C{off_layers[m - buffer_slots]}")
        elif i:
            deps.append(f"C{i-1}")
        tasks[f"T{i}"] = {"dur": transfer[i], "stream": COPY, "deps": deps}
    stream_open = {COMPUTE: 0.0, COPY: -prefetch_window if overlap else 0.0}
    stream_busy = {COMPUTE: False, COPY: False}
    done: dict[str, float] = {}
    started: set[str] = set()
    queue: list[tuple[float, int, str]] = []
    seq = 0
    now = min(stream_open.values())
    wakeups = sorted(set(stream_open.values()))
    while len(done) < len(tasks):
        progressed = False
        for name in sorted(tasks, key=lambda s: (s[0] != "T", int(s[1:]))):
            t = tasks[name]
            if name in started or stream_busy[t["stream"]] or now < stream_open[t["stream"]]:
                continue
            if all(d in done for d in t["deps"]):
                started.add(name)
                stream_busy[t["stream"]] = True
                heapq.heappush(queue, (now + t["dur"], seq, name))
                seq += 1
                progressed = True
        if progressed:
            continue
        future = [w for w in wakeups if w > now]
        if queue and (not future or queue[0][0] <= future[0]):
            end, _, name = heapq.heappop(queue)
            now = end
            done[name] = end
            stream_busy[tasks[name]["stream"]] = False
        elif future:
            now = future[0]
        else:
            raise RuntimeError("deadlock in event oracle")
    return done[f"C{n-1}"] if n else 0.0


def draft_forward_time(num_layers: int, cost: CostModel, tokens: int) -> float:
    """The draft is fully GPU-resident: one pass is pure compute."""
    return num_layers * cost.compute_time(tokens)


@dataclass(frozen=True)
class IterationCost:
    speculation_s: float
    verification_s: float

    @property
    def total_s(self) -> float:
        return self.speculation_s + self.verification_s


def simulate_sd_iteration(placement: LayerPlacement, cost: CostModel, depth: int, top_k: int, *,
                          async_transfer: bool = True, t_draft: float | None = None) -> IterationCost:
    """Speculate ``depth`` draft passes, then verify a ``1 + k*D`` node tree.

    With ``async_transfer`` the first offloaded copy may start during
    speculation. ``t_draft`` defaults to a resident pass over ``top_k`` tokens.
    """
    if t_draft is None:
        t_draft = draft_forward_time(placement.num_layers, cost, top_k)
    spec = depth * t_draft
    verify, _ = simulate_verify_pipeline(placement, cost, 1 + top_k * depth, overlap=async_transfer,
                                         prefetch_window=spec if async_transfer else 0.0)
    return IterationCost(spec, verify)


@dataclass(frozen=True)
class DepthCosts:
    t_target: float
    t_draft: float
    # tokens in flight -> seconds; used to derive gamma from tree size.
    verify_time: Callable[[int], float] | None = None


@dataclass(frozen=True)
class SweepRow:
    depth: int
    tau: float
    speculation_s: float
    verification_s: float
    speedup: float


@dataclass
class SweepResult:
    rows: list[SweepRow]

    @property
    def best(self) -> SweepRow:
        return max(self.rows, key=lambda r: (r.speedup, -r.depth))

    @property
    def best_depth(self) -> int:
        return self.best.depth

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["D", "tau", "speculation_s", "verification_s", "speedup"])
        for r in self.rows:
            writer.writerow([r.depth, repr(r.tau), repr(r.speculation_s), repr(r.verification_s), repr(r.speedup)])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())


def sweep_depth(costs: DepthCosts, accept_model, depths: Iterable[int], top_k: int,
                gamma: float | None = None) -> SweepResult:
    """Predicted speedup for each depth.

    With a fixed ``gamma`` verification costs ``gamma * t_target``; otherwise
    ``costs.verify_time(1 + k*D)`` prices the whole tree, so gamma grows with
    the number of tree tokens.
    """
    depths = list(depths)
    if not depths:
        raise InvalidInputError("depth range is empty")
    if gamma is None and costs.verify_time is None:
        raise InvalidInputError("need a fixed gamma or a verify_time model")
    rows = []
    for d in depths:
        tau = accept_model.tau(d)
        verify = gamma * costs.t_target if gamma is not None else costs.verify_time(1 + top_k * d)
        g = verify / costs.t_target
        inputs = SpeedupInputs(1, costs.t_target, costs.t_draft, d, g, tau, check_gamma_band=False)
        rows.append(SweepRow(d, tau, d * costs.t_draft, verify, analytic_speedup(inputs)))
    return SweepResult(rows)


def is_unimodal(values: Sequence[float]) -> bool:
    """Non-decreasing up to the (first) maximum, non-increasing after it."""
    if not values:
        return False
    peak = max(range(len(values)), key=lambda i: (values[i], -i))
    left = all(a <= b for a, b in zip(values[:peak], values[1 : peak + 1]))
    right = all(a >= b for a, b in zip(values[peak:], values[peak + 1 :]))
    return left and right


def gamma_from_pipeline(placement: LayerPlacement, cost: CostModel, tree_tokens: int, *,
                        overlap: bool = True) -> float:
    """Verification cost of a tree relative to a single-token pass."""
    t1, _ = simulate_verify_pipeline(placement, cost, 1, overlap=overlap)
    tv, _ = simulate_verify_pipeline(placement, cost, tree_tokens, overlap=overlap)
    return tv / t1
