"""Deterministic traffic generators, metric reports, and fleet arithmetic.

Every generator is a pure function of its spec and seed. Reports use
nearest-rank percentiles. Plotting is out of scope here; the report module
renders figures from these machine-readable outputs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, asdict

DEFAULT_HOTSET_TARGETS = (128, 192, 256, 384, 512)
DEFAULT_UNIQUE_TARGETS = (64, 128, 256, 512, 1024, 2048)
DEFAULT_SLO_MS = 5000
DEFAULT_STALL_MS = 20_000

TRAFFIC_KINDS = ("hotset_ladder", "unique_ladder", "staircase", "poisson", "hot_reload")
ROLLOUT_MODES = ("immediate", "admitted", "two_phase")


class SpecError(Exception):
    pass


@dataclass(frozen=True)
class Arrival:
    request_id: str
    name: str
    arrival_ms: int | None  # None = deferred until the named trigger fires
    group: str = ""
    trigger: str | None = None  # "ready" for two-phase new-adapter arrivals


@dataclass
class TrafficSpec:
    kind: str
    seed: int = 0
    # poisson
    rate_rps: float = 1.0
    duration_s: float = 180.0
    names: list[str] = field(default_factory=list)
    # ladders
    targets: list[int] = field(default_factory=list)
    draws_per_target: int = 0  # 0 = one full shuffled pass only
    # staircase
    distinct: int = 16
    # hot reload
    warm_count: int = 32
    new_count: int = 16
    warm_rps: float = 0.5
    reload_at_ms: int = 10_000
    tail_ms: int = 30_000
    rollout_mode: str = "immediate"
    # shared
    slo_ms: int = DEFAULT_SLO_MS
    stall_ms: int = DEFAULT_STALL_MS

    def __post_init__(self):
        if self.kind not in TRAFFIC_KINDS:
            raise SpecError(f"unknown traffic kind {self.kind!r}")
        if self.rate_rps <= 0 or self.duration_s <= 0 or self.warm_rps <= 0:
            raise SpecError("rates and durations must be positive")
        if self.targets and list(self.targets) != sorted(set(self.targets)):
            raise SpecError("targets must be strictly increasing")
        if self.rollout_mode not in ROLLOUT_MODES:
            raise SpecError(f"unknown rollout mode {self.rollout_mode!r}")

    @staticmethod
    def from_json(doc: dict) -> "TrafficSpec":
        return TrafficSpec(**doc)

    def to_json(self) -> dict:
        return asdict(self)


def gen_trace(spec: TrafficSpec) -> list[Arrival]:
    """Expand a traffic spec into a deterministic arrival schedule."""
    if spec.kind == "poisson":
        return _gen_poisson(spec)
    if spec.kind == "staircase":
        return [
            Arrival(f"s{i:04d}", f"cold-{i:04d}", 0, group="cold")
            for i in range(spec.distinct)
        ]
    if spec.kind in ("hotset_ladder", "unique_ladder"):
        return _gen_ladder(spec)
    if spec.kind == "hot_reload":
        return _gen_hot_reload(spec)
    raise SpecError(spec.kind)


def _gen_poisson(spec: TrafficSpec) -> list[Arrival]:
    rng = random.Random(spec.seed)
    names = spec.names or ["policy-000"]
    out = []
    t = 0.0
    horizon_ms = spec.duration_s * 1000
    i = 0
    while True:
        t += rng.expovariate(spec.rate_rps) * 1000
        if t >= horizon_ms:
            break
        out.append(Arrival(f"q{i:05d}", rng.choice(names), int(t), group="open"))
        i += 1
    return out


def _gen_ladder(spec: TrafficSpec) -> list[Arrival]:
    """Per-target request streams over a name universe sized to the target.

    Each rung starts with one shuffled full pass over the target names so
    every name is touched, then optional uniform draws model recurrence.
    Hotset and unique ladders differ only in the post-pass draws.
    """
    targets = list(spec.targets) or list(
        DEFAULT_HOTSET_TARGETS if spec.kind == "hotset_ladder" else DEFAULT_UNIQUE_TARGETS
    )
    rng = random.Random(spec.seed)
    out = []
    i = 0
    for target in targets:
        names = [f"ladder-{target}-{j:05d}" for j in range(target)]
        order = list(names)
        rng.shuffle(order)
        sequence = list(order)
        if spec.kind == "hotset_ladder":
            sequence += [rng.choice(names) for _ in range(spec.draws_per_target)]
        for name in sequence:
            out.append(Arrival(f"l{i:06d}", name, 0, group=f"target-{target}"))
            i += 1
    return out


def _gen_hot_reload(spec: TrafficSpec) -> list[Arrival]:
    """Warm probes at a fixed cadence plus a burst of newly registered names.

    Warm arrivals are periodic so the interference window around the reload
    is hit deterministically. In two_phase mode the new-name arrivals carry
    a `ready` trigger instead of a wall-clock arrival.
    """
    period = int(round(1000 / spec.warm_rps))
    horizon = spec.reload_at_ms + spec.tail_ms
    out = []
    t = period // 4
    i = 0
    while t < horizon:
        out.append(Arrival(f"w{i:04d}", f"warm-{i % spec.warm_count:03d}", t, group="warm"))
        t += period
        i += 1
    for j in range(spec.new_count):
        name = f"new-{j:03d}"
        if spec.rollout_mode == "two_phase":
            out.append(Arrival(f"n{j:04d}", name, None, group="new", trigger="ready"))
        else:
            out.append(Arrival(f"n{j:04d}", name, spec.reload_at_ms, group="new"))
    return sorted(out, key=lambda a: (a.arrival_ms is None, a.arrival_ms or 0, a.request_id))


# -- metrics -----------------------------------------------------------------


def nearest_rank(sorted_values: list, p: float):
    """Nearest-rank percentile on an already sorted list."""
    if not sorted_values:
        return None
    rank = math.ceil(p / 100 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


@dataclass
class MetricsReport:
    count: int
    completed: int
    rejected: int
    ttft_p50: float | None
    ttft_p95: float | None
    ttft_p99: float | None
    e2e_p50: float | None
    e2e_p95: float | None
    e2e_p99: float | None
    load_p50: float | None
    load_p95: float | None
    load_p99: float | None
    slo_attainment: float
    achieved_rps: float
    stalls_over_threshold: int
    per_path: dict[str, int]

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(
    traces,
    slo_ms: int = DEFAULT_SLO_MS,
    stall_ms: int = DEFAULT_STALL_MS,
    duration_s: float | None = None,
) -> MetricsReport:
    """Summarize request traces; percentiles are nearest-rank."""
    completed = [t for t in traces if t.path != "rejected" and t.ttft_ms is not None]
    rejected = [t for t in traces if t.path == "rejected"]
    ttft = sorted(t.ttft_ms for t in completed)
    e2e = sorted(t.e2e_ms for t in completed)
    load = sorted(t.load_ms for t in completed)
    per_path: dict[str, int] = {}
    for t in traces:
        per_path[t.path] = per_path.get(t.path, 0) + 1
    if duration_s is None:
        horizon = max((t.arrival_ms for t in traces), default=0)
        duration_s = max(horizon / 1000, 1e-9)
    return MetricsReport(
        count=len(traces),
        completed=len(completed),
        rejected=len(rejected),
        ttft_p50=nearest_rank(ttft, 50),
        ttft_p95=nearest_rank(ttft, 95),
        ttft_p99=nearest_rank(ttft, 99),
        e2e_p50=nearest_rank(e2e, 50),
        e2e_p95=nearest_rank(e2e, 95),
        e2e_p99=nearest_rank(e2e, 99),
        load_p50=nearest_rank(load, 50),
        load_p95=nearest_rank(load, 95),
        load_p99=nearest_rank(load, 99),
        slo_attainment=(
            sum(1 for v in ttft if v <= slo_ms) / len(ttft) if ttft else 0.0
        ),
        achieved_rps=len(completed) / duration_s,
        stalls_over_threshold=sum(1 for v in ttft if v > stall_ms),
        per_path=per_path,
    )


# -- fleet sizing --------------------------------------------------------------


@dataclass(frozen=True)
class FleetRow:
    axis: str
    rule: str
    engines: int
    gpus: int


@dataclass(frozen=True)
class FleetPlan:
    rows: tuple[FleetRow, ...]

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def row(self, axis: str) -> FleetRow:
        return next(r for r in self.rows if r.axis == axis)


def fleet_size(
    active_wave: int,
    batch_window: int = 64,
    gpus_per_engine: int = 4,
    headroom_factors: tuple[float, ...] = (1.2, 1.33, 1.5),
    warm_rps_per_engine: float = 2.57,
    slo_window_s: float = 60.0,
    cold_loads_per_s: float = 38.3,
    cold_rate_per_engine: float = 0.7,
    cold_cap_per_engine: int = 32,
) -> FleetPlan:
    """Engine and GPU counts for one active wave of distinct adapters.

    Four sizing axes: ceil-division placement by the same-batch window, a
    multiplicative headroom band on that placement, a throughput-only floor
    from the warm SLO window, and cold-path isolation by per-engine cold
    budget.
    """
    if active_wave <= 0 or batch_window <= 0 or gpus_per_engine <= 0:
        raise SpecError("fleet inputs must be positive")
    placement = math.ceil(active_wave / batch_window)
    rows = [
        FleetRow(
            "warm_placement",
            f"ceil({active_wave}/{batch_window})",
            placement,
            placement * gpus_per_engine,
        )
    ]
    for factor in headroom_factors:
        engines = math.ceil(placement * factor)
        rows.append(
            FleetRow(
                f"warm_headroom_x{factor}",
                f"ceil({placement}*{factor})",
                engines,
                engines * gpus_per_engine,
            )
        )
    demand_rps = active_wave / slo_window_s
    floor = math.ceil(demand_rps / warm_rps_per_engine)
    rows.append(
        FleetRow(
            "warm_throughput_floor",
            f"ceil({active_wave}/{slo_window_s:g}s/{warm_rps_per_engine})",
            floor,
            floor * gpus_per_engine,
        )
    )
    cold_rate = math.ceil(cold_loads_per_s / cold_rate_per_engine)
    rows.append(
        FleetRow(
            "cold_load_rate",
            f"ceil({cold_loads_per_s}/{cold_rate_per_engine})",
            cold_rate,
            cold_rate * gpus_per_engine,
        )
    )
    burst = math.ceil(active_wave / cold_cap_per_engine)
    rows.append(
        FleetRow(
            "cold_burst_isolation",
            f"ceil({active_wave}/{cold_cap_per_engine})",
            burst,
            burst * gpus_per_engine,
        )
    )
    return FleetPlan(tuple(rows))
