"""Accelerator execution schedules for MoE layers, and their cost accounting.

Three strategies are modeled on a device with one DRAM channel and one
compute unit (events never overlap within a resource):

* ``naive``: all N expert weights stay resident on chip.  Latency counts
  steady-state compute only; the one-time fill shows up in the frame-0
  trace and load count but never gates compute.
* ``cached``: tokens run in arrival order against an LRU cache of expert
  weights; every miss serializes a weight load in front of that token's
  compute.  The cache persists across frames.
* ``reordered``: tokens are regrouped per expert and experts execute in
  ascending index order through a double buffer -- while expert i
  computes, expert i+1's weights stream in, so only two expert slots ever
  exist on chip and loads hide behind compute whenever compute is long
  enough.

All timing arithmetic runs in relative time (t0 = 0) so latencies are
bit-stable regardless of where a layer lands on the global clock; trace
events are shifted by the caller's offset afterwards.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import ShapeError
from .moe import GatingDecision, MoeLayerParams, expert_forward
from .vit import ModelConfig, non_moe_macs

STRATEGIES = ("naive", "cached", "reordered")


@dataclass(frozen=True)
class ExpertQueues:
    """Per-expert token queues: (token index, gate weight), ascending tokens."""

    queues: list[list[tuple[int, np.float32]]]
    n_tokens: int

    @property
    def n_experts(self) -> int:
        return len(self.queues)

    @property
    def lengths(self) -> list[int]:
        return [len(q) for q in self.queues]

    @property
    def active_experts(self) -> list[int]:
        return [e for e, q in enumerate(self.queues) if q]

    @property
    def total_assignments(self) -> int:
        return sum(self.lengths)


def build_queues(decision: GatingDecision) -> ExpertQueues:
    """Regroup a gating decision expert-major; queue order is token order."""
    queues: list[list[tuple[int, np.float32]]] = [[] for _ in range(decision.n_experts)]
    for t in range(decision.n_tokens):
        for slot in range(decision.top_k):
            e = int(decision.expert_ids[t, slot])
            queues[e].append((t, decision.gate_weights[t, slot]))
    return ExpertQueues(queues=queues, n_tokens=decision.n_tokens)


@dataclass(frozen=True)
class CostModel:
    """Device constants; times in seconds, sizes in bytes, rates per second."""

    expert_weight_bytes: int
    dram_bandwidth: float  # bytes / s
    mac_throughput: float  # multiply-accumulates / s
    base_onchip_bytes: int  # everything resident besides expert weights
    chip_capacity: int
    power: float  # watts
    expert_macs_per_token: int
    cache_capacity_experts: int = 1

    def __post_init__(self):
        if self.expert_weight_bytes <= 0 or self.chip_capacity <= 0:
            raise ShapeError("expert_weight_bytes and chip_capacity must be positive")
        if self.base_onchip_bytes < 0:
            raise ShapeError("base_onchip_bytes must be >= 0")
        if self.dram_bandwidth <= 0 or self.mac_throughput <= 0 or self.power <= 0:
            raise ShapeError("dram_bandwidth, mac_throughput and power must be positive")
        if self.expert_macs_per_token <= 0:
            raise ShapeError("expert_macs_per_token must be positive")
        if self.cache_capacity_experts < 1:
            raise ShapeError("cache_capacity_experts must be >= 1")

    @property
    def load_time(self) -> float:
        return self.expert_weight_bytes / self.dram_bandwidth

    @property
    def token_compute_time(self) -> float:
        return self.expert_macs_per_token / self.mac_throughput


@dataclass(frozen=True)
class TraceEvent:
    frame: int
    layer: int
    kind: str  # load | compute | stall
    resource: str  # memory | compute
    start: float
    end: float
    expert_id: int | None = None


@dataclass(frozen=True)
class SimReport:
    strategy: str
    latency: float  # seconds
    energy: float  # joules; always latency * power
    peak_onchip_bytes: int
    load_events: int
    feasible: bool
    trace: list[TraceEvent] = field(default_factory=list)
    frame_latencies: list[float] = field(default_factory=list)

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "strategy": self.strategy,
            "latency_s": self.latency,
            "energy_j": self.energy,
            "peak_onchip_bytes": self.peak_onchip_bytes,
            "load_events": self.load_events,
            "feasible": self.feasible,
            "frame_latencies_s": list(self.frame_latencies),
        }
        if include_trace:
            out["trace"] = [
                {
                    "frame": e.frame,
                    "layer": e.layer,
                    "kind": e.kind,
                    "resource": e.resource,
                    "start": e.start,
                    "end": e.end,
                    "expert_id": e.expert_id,
                }
                for e in self.trace
            ]
        return out


class LruCache:
    """Least-recently-used set of expert ids with a fixed capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ShapeError("cache capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict[int, None] = OrderedDict()

    def lookup(self, key: int) -> bool:
        """True on hit; a hit refreshes the entry's recency."""
        if key in self._entries:
            self._entries.move_to_end(key)
            return True
        return False

    def insert(self, key: int) -> int | None:
        """Insert a missing key, returning the evicted key if the cache was full."""
        evicted = None
        if len(self._entries) >= self.capacity:
            evicted, _ = self._entries.popitem(last=False)
        self._entries[key] = None
        return evicted

    def contents(self) -> list[int]:
        """Entries from least to most recently used."""
        return list(self._entries)


def _shift(events: list[TraceEvent], t0: float) -> list[TraceEvent]:
    if t0 == 0.0:
        return events
    return [replace(e, start=t0 + e.start, end=t0 + e.end) for e in events]


def simulate_reordered(
    queues: ExpertQueues,
    cost: CostModel,
    frame: int = 0,
    layer: int = 0,
    t0: float = 0.0,
) -> SimReport:
    """Double-buffered expert-major execution of one MoE layer.

    Active experts run in ascending index order.  Expert i's weights may
    stream while expert i-1 computes, but loading expert i+1 must wait for
    the buffer expert i-1 occupied, so a load starts only after both the
    memory channel and that buffer are free.  Peak on-chip footprint is
    the base plus exactly two expert slots, for any expert count.
    """
    peak = cost.base_onchip_bytes + 2 * cost.expert_weight_bytes
    feasible = peak <= cost.chip_capacity
    active = queues.active_experts
    if not active:
        return SimReport("reordered", 0.0, 0.0, peak, 0, feasible)
    load = cost.load_time
    events: list[TraceEvent] = []
    load_ends: list[float] = []
    compute_ends: list[float] = []
    for idx, e in enumerate(active):
        buffer_free = compute_ends[idx - 2] if idx >= 2 else 0.0
        load_start = max(load_ends[idx - 1], buffer_free) if idx >= 1 else 0.0
        load_end = load_start + load
        load_ends.append(load_end)
        events.append(TraceEvent(frame, layer, "load", "memory", load_start, load_end, e))
        duration = len(queues.queues[e]) * cost.token_compute_time
        prev_end = compute_ends[idx - 1] if idx >= 1 else 0.0
        compute_start = max(prev_end, load_end)
        if compute_start > prev_end:
            events.append(TraceEvent(frame, layer, "stall", "compute", prev_end, compute_start, e))
        compute_end = compute_start + duration
        compute_ends.append(compute_end)
        events.append(TraceEvent(frame, layer, "compute", "compute", compute_start, compute_end, e))
    latency = compute_ends[-1]
    return SimReport(
        strategy="reordered",
        latency=latency,
        energy=latency * cost.power,
        peak_onchip_bytes=peak,
        load_events=len(active),
        feasible=feasible,
        trace=_shift(events, t0),
    )


def simulate_naive(
    queues: ExpertQueues,
    cost: CostModel,
    frame: int = 0,
    layer: int = 0,
    t0: float = 0.0,
    include_startup: bool = True,
) -> SimReport:
    """All-expert-resident execution of one MoE layer.

    Latency is the steady-state compute time of the active experts.  When
    ``include_startup`` is set (frame 0), the one-time fill of all N
    expert weights is emitted as load events ahead of compute and counted
    in ``load_events``, but it is excluded from the latency metric.
    """
    n = queues.n_experts
    peak = cost.base_onchip_bytes + n * cost.expert_weight_bytes
    feasible = peak <= cost.chip_capacity
    events: list[TraceEvent] = []
    cursor = 0.0
    load_events = 0
    if include_startup:
        for e in range(n):
            events.append(
                TraceEvent(frame, layer, "load", "memory", cursor, cursor + cost.load_time, e)
            )
            cursor += cost.load_time
        load_events = n
    latency = 0.0
    for e in queues.active_experts:
        duration = len(queues.queues[e]) * cost.token_compute_time
        events.append(TraceEvent(frame, layer, "compute", "compute", cursor, cursor + duration, e))
        cursor += duration
        latency += duration
    return SimReport(
        strategy="naive",
        latency=latency,
        energy=latency * cost.power,
        peak_onchip_bytes=peak,
        load_events=load_events,
        feasible=feasible,
        trace=_shift(events, t0),
    )


def simulate_cached(
    decision: GatingDecision,
    cost: CostModel,
    cache: LruCache | None = None,
    frame: int = 0,
    layer: int = 0,
    t0: float = 0.0,
) -> tuple[SimReport, LruCache]:
    """Token-order execution against an LRU cache of expert weights.

    Tokens are processed in arrival order and each token's experts in gate
    order (descending gate weight).  A miss evicts the least recently used
    expert and serializes a full weight load before that token's compute;
    there is no overlap of loads with compute.  Pass the returned cache
    back in to persist its state across frames.
    """
    if cache is None:
        cache = LruCache(cost.cache_capacity_experts)
    peak = cost.base_onchip_bytes + cache.capacity * cost.expert_weight_bytes
    feasible = peak <= cost.chip_capacity
    events: list[TraceEvent] = []
    cursor = 0.0
    misses = 0
    for t in range(decision.n_tokens):
        for slot in range(decision.top_k):
            e = int(decision.expert_ids[t, slot])
            if not cache.lookup(e):
                cache.insert(e)
                misses += 1
                events.append(
                    TraceEvent(frame, layer, "load", "memory", cursor, cursor + cost.load_time, e)
                )
                events.append(
                    TraceEvent(frame, layer, "stall", "compute", cursor, cursor + cost.load_time, e)
                )
                cursor += cost.load_time
            events.append(
                TraceEvent(
                    frame, layer, "compute", "compute", cursor, cursor + cost.token_compute_time, e
                )
            )
            cursor += cost.token_compute_time
    report = SimReport(
        strategy="cached",
        latency=cursor,
        energy=cursor * cost.power,
        peak_onchip_bytes=peak,
        load_events=misses,
        feasible=feasible,
        trace=_shift(events, t0),
    )
    return report, cache


def execute_reordered(
    layer: MoeLayerParams,
    tokens: np.ndarray,
    decision: GatingDecision,
    expert_order: list[int] | None = None,
) -> np.ndarray:
    """Numerically execute a layer expert-by-expert, batched per queue.

    With the default ascending ``expert_order`` this reproduces
    :func:`moesim.moe.moe_forward_reference` bit for bit: each token's
    contributions still accumulate in ascending expert-index order, and
    batching an expert's queue cannot change any row's bits because every
    kernel is row-independent.  ``expert_order`` exists so tests can show
    that other orders break bitwise equality.
    """
    queues = build_queues(decision)
    order = queues.active_experts if expert_order is None else expert_order
    out = np.zeros_like(tokens)
    for e in order:
        entries = queues.queues[e]
        if not entries:
            continue
        rows = np.ascontiguousarray(tokens[[t for t, _ in entries]])
        ys = expert_forward(layer.experts[e], rows)
        for i, (t, w) in enumerate(entries):
            out[t] = out[t] + w * ys[i]
    return out


@dataclass(frozen=True)
class FrameRouting:
    """One frame's routing work: a task id and one decision per MoE layer."""

    task_id: int
    decisions: list[GatingDecision]


@dataclass(frozen=True)
class Workload:
    frames: list[FrameRouting]

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def simulate_model(
    config: ModelConfig, workload: Workload, cost: CostModel, strategy: str
) -> SimReport:
    """Compose per-layer simulations into a whole-model, multi-frame report.

    Each frame contributes a fixed compute block for everything outside
    the MoE layers (patch embed, attention, dense MLPs; layer index -1 in
    the trace) plus one simulated MoE layer per decision.  Latency is the
    sum of those parts; peak is the maximum across layers; cached layers
    keep their own LRU state across frames.
    """
    if strategy not in STRATEGIES:
        raise ShapeError(f"unknown strategy {strategy!r}")
    fixed_time = non_moe_macs(config) / cost.mac_throughput
    caches: dict[int, LruCache] = {}
    events: list[TraceEvent] = []
    latency = 0.0
    cursor = 0.0
    load_events = 0
    peak = cost.base_onchip_bytes
    feasible = True
    frame_latencies: list[float] = []
    for f, frame in enumerate(workload.frames):
        frame_latency = fixed_time
        latency += fixed_time
        events.append(TraceEvent(f, -1, "compute", "compute", cursor, cursor + fixed_time, None))
        cursor += fixed_time
        for l, decision in enumerate(frame.decisions):
            if strategy == "cached":
                rep, caches[l] = simulate_cached(
                    decision, cost, caches.get(l), frame=f, layer=l, t0=cursor
                )
            else:
                queues = build_queues(decision)
                if strategy == "naive":
                    rep = simulate_naive(
                        queues, cost, frame=f, layer=l, t0=cursor, include_startup=(f == 0)
                    )
                else:
                    rep = simulate_reordered(queues, cost, frame=f, layer=l, t0=cursor)
            events.extend(rep.trace)
            if rep.trace:
                cursor = max(cursor, max(e.end for e in rep.trace))
            latency += rep.latency
            frame_latency += rep.latency
            load_events += rep.load_events
            peak = max(peak, rep.peak_onchip_bytes)
            feasible = feasible and rep.feasible
        frame_latencies.append(frame_latency)
    return SimReport(
        strategy=strategy,
        latency=latency,
        energy=latency * cost.power,
        peak_onchip_bytes=peak,
        load_events=load_events,
        feasible=feasible,
        trace=events,
        frame_latencies=frame_latencies,
    )


def memory_account(config: ModelConfig, cost: CostModel) -> dict[str, int]:
    """Peak on-chip expert-weight footprint per strategy, in bytes."""
    e = cost.expert_weight_bytes
    return {
        "naive": cost.base_onchip_bytes + config.expert_count * e,
        "cached": cost.base_onchip_bytes + cost.cache_capacity_experts * e,
        "reordered": cost.base_onchip_bytes + 2 * e,
    }


def trace_to_csv(events: list[TraceEvent]) -> str:
    """Render events as CSV with integer-nanosecond times, chronologically."""
    rows = ["frame,layer,phase_kind,resource,start_ns,end_ns,expert_id"]
    ordered = sorted(
        events,
        key=lambda e: (
            round(e.start * 1e9),
            0 if e.resource == "memory" else 1,
            round(e.end * 1e9),
            e.frame,
        ),
    )
    for e in ordered:
        expert = "" if e.expert_id is None else str(e.expert_id)
        rows.append(
            f"{e.frame},{e.layer},{e.kind},{e.resource},"
            f"{round(e.start * 1e9)},{round(e.end * 1e9)},{expert}"
        )
    return "\n".join(rows) + "\n"
