"""Deterministic serving-actor simulator.

One actor holds a resident base and serves adapter traffic through three
tiers: the durable catalog, a CPU adapter cache with LRU-under-pinning
eviction, and the distinct-adapter window of the running batch. Cold
loading is scheduled service work: single-flight per revision, bounded by
max-inflight and queue-depth, and serialized through one exclusive engine
lock that batch formation also passes through. Admission control caps how
many load slices may hold that lock between batch formations; two-phase
readiness gates user traffic until a prewarm activation completes.

Simulated mode advances a millisecond event clock and is bit-deterministic
per seed. Real-file mode replaces the fetch slice with an actual packed
file read. While gating is on, ready revisions stay pinned in the CPU
cache so ready-path requests never fall back to a cold load.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import packfmt

DEFAULT_GPU_WINDOW = 64
DEFAULT_LOAD_SLICE_MS = 1360
DEFAULT_PROMPT_TOKENS = 1024
DEFAULT_OUTPUT_TOKENS = 64
DEFAULT_TTFT_SLO_MS = 5000
STALL_THRESHOLD_MS = 20_000

PATHS = ("gpu_hit", "cpu_promote", "cold_load", "ready_path", "rejected")


class ScenarioError(Exception):
    pass


class UnknownPolicy(ScenarioError):
    pass


class IncompatibleRevision(ScenarioError):
    pass


class ColdLoadRejected(ScenarioError):
    """Bounded backpressure: retryable by the client after a short backoff."""

    def __init__(self, revision_id: str, suggested_backoff_ms: int = 1000):
        super().__init__(f"{revision_id}: load queue full, retry in {suggested_backoff_ms} ms")
        self.revision_id = revision_id
        self.suggested_backoff_ms = suggested_backoff_ms
        self.retryable = True


class CapacityImpossible(ScenarioError):
    pass


class EventLoop:
    """Millisecond event clock; ties break in schedule order."""

    def __init__(self):
        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []

    def schedule(self, delay_ms: int, fn: Callable[[], None]):
        self._seq += 1
        heapq.heappush(self._heap, (self.now + max(0, int(delay_ms)), self._seq, fn))

    def run(self, until_ms: int | None = None):
        while self._heap:
            t, _seq, fn = self._heap[0]
            if until_ms is not None and t > until_ms:
                self.now = until_ms
                return
            heapq.heappop(self._heap)
            self.now = t
            fn()
        if until_ms is not None and until_ms > self.now:
            self.now = until_ms


@dataclass
class LatencyModel:
    """Cold-load slice components plus per-request service costs."""

    fetch_ms: int = 400
    build_ms: int = 700
    register_ms: int = 160
    activate_ms: int = 100
    prefill_ms: int = 500
    decode_ms_per_token: int = 10
    promote_ms: int = 50

    def __post_init__(self):
        for name in ("fetch_ms", "build_ms", "register_ms", "activate_ms",
                     "prefill_ms", "decode_ms_per_token", "promote_ms"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be >= 0")

    @property
    def load_slice_ms(self) -> int:
        return self.fetch_ms + self.build_ms + self.register_ms + self.activate_ms

    @staticmethod
    def from_json(doc: dict) -> "LatencyModel":
        return LatencyModel(**doc)


@dataclass(frozen=True)
class RevisionInfo:
    revision_id: str
    base_id: str = "base"
    rank: int = 1
    bytes_size: int = 1 << 20


@dataclass
class Request:
    request_id: str
    name: str  # policy name or pinned revision id
    arrival_ms: int
    output_tokens: int = DEFAULT_OUTPUT_TOKENS
    group: str = ""  # client-side tag carried into the trace (warm/new/...)


@dataclass
class RequestTrace:
    request_id: str
    policy: str
    revision_id: str
    arrival_ms: int
    path: str
    ttft_ms: int | None
    e2e_ms: int | None
    load_ms: int
    group: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.path != "rejected"


@dataclass(eq=False)
class LoadJob:
    revision_id: str
    state: str  # queued | loading | done | rejected
    enqueue_ms: int
    info: "RevisionInfo | None" = None
    internal: bool = False  # prewarm-owned job
    start_ms: int | None = None
    end_ms: int | None = None
    waiters: list = field(default_factory=list)


@dataclass
class PrewarmReport:
    span_ms: int
    started_ms: int
    activation_ms: dict[str, int] = field(default_factory=dict)
    retries: int = 0


@dataclass
class ActorConfig:
    actor_id: str = "actor-0"
    base_id: str = "base"
    gpu_window: int = DEFAULT_GPU_WINDOW  # max distinct adapters per batch
    cpu_capacity_entries: int = 1024
    cpu_capacity_bytes: int = 64 << 30
    max_inflight: int = 1
    queue_depth: int = 16
    max_running: int = 8  # concurrent requests in the batch
    max_rank: int = 64
    gating: bool = False
    admission_cap: int | None = None  # None = admission off
    latency: LatencyModel = field(default_factory=LatencyModel)

    @staticmethod
    def from_json(doc: dict) -> "ActorConfig":
        doc = dict(doc)
        if "latency" in doc:
            doc["latency"] = LatencyModel.from_json(doc["latency"])
        return ActorConfig(**doc)


class AdaptiveActivationPolicy:
    """SLO-aware cold-activation cap; ships disabled.

    Widens the per-round load budget while recent warm TTFT stays under the
    target and snaps back to the conservative cap once it degrades. The
    measured result for this scheduler was negative (aggressive settings
    hurt warm tails), so nothing enables it by default.
    """

    def __init__(self, target_ttft_ms: int = 5000, min_cap: int = 1, max_cap: int = 4,
                 window: int = 8):
        self.target_ttft_ms = target_ttft_ms
        self.min_cap = min_cap
        self.max_cap = max_cap
        self.window = window
        self._recent: list[int] = []

    def observe(self, ttft_ms: int):
        self._recent.append(ttft_ms)
        if len(self._recent) > self.window:
            self._recent.pop(0)

    def current_cap(self) -> int:
        if not self._recent:
            return self.min_cap
        worst = max(self._recent)
        if worst <= self.target_ttft_ms // 2:
            return self.max_cap
        if worst <= self.target_ttft_ms:
            return max(self.min_cap, self.max_cap // 2)
        return self.min_cap


class EngineLock:
    """Exclusive lock shared by load activation and batch formation.

    Batch-formation grants are zero-duration ordering points. With
    admission off the queue is strictly FIFO, so a burst of cold loads
    stalls later warm work; with a cap, at most `cap` load grants run
    between batch formations. `cap_provider` overrides the fixed cap so an
    adaptive policy can retune it per decision.
    """

    def __init__(self, loop: EventLoop, admission_cap: int | None,
                 cap_provider: Callable[[], int] | None = None):
        self.loop = loop
        self.admission_cap = admission_cap
        self.cap_provider = cap_provider
        self.busy = False
        self._seq = 0
        self._work: list[tuple[int, int, Callable]] = []
        self._loads: list[tuple[int, int, Callable]] = []
        self._loads_since_work = 0

    def request(self, kind: str, grant: Callable[[], None]):
        self._seq += 1
        item = (self.loop.now, self._seq, grant)
        (self._loads if kind == "load" else self._work).append(item)
        if not self.busy:
            self._dispatch()

    def _pop_next(self):
        cap = self.admission_cap
        if self.cap_provider is not None:
            cap = self.cap_provider()
        if cap is None:
            pools = [p for p in (self._work, self._loads) if p]
            if not pools:
                return None
            pool = min(pools, key=lambda p: (p[0][0], p[0][1]))
            return pool.pop(0)
        # one round = at most `cap` load slices, then drain all pending work
        if self._loads and (not self._work or self._loads_since_work < cap):
            self._loads_since_work += 1
            return self._loads.pop(0)
        if self._work:
            item = self._work.pop(0)
            if not self._work:
                self._loads_since_work = 0  # round complete once work drains
            return item
        return None

    def _dispatch(self):
        item = self._pop_next()
        if item is None:
            return
        self.busy = True
        item[2]()

    def release(self):
        self.busy = False
        self._dispatch()


class CpuCache:
    """LRU adapter cache with entry and byte bounds; pinned entries stay.

    `protected` lets the actor shield entries beyond batch pins (two-phase
    gating keeps ready revisions resident so the ready path never reloads).
    """

    def __init__(
        self,
        capacity_entries: int,
        capacity_bytes: int,
        protected: Callable[[str], bool] | None = None,
    ):
        self.capacity_entries = capacity_entries
        self.capacity_bytes = capacity_bytes
        self.protected = protected
        self._entries: dict[str, int] = {}  # revision -> bytes, dict order = LRU
        self._pins: dict[str, int] = {}
        self.total_bytes = 0

    def __contains__(self, revision_id: str) -> bool:
        return revision_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def pin(self, revision_id: str):
        self._pins[revision_id] = self._pins.get(revision_id, 0) + 1

    def unpin(self, revision_id: str):
        count = self._pins.get(revision_id, 0) - 1
        if count <= 0:
            self._pins.pop(revision_id, None)
        else:
            self._pins[revision_id] = count

    def pinned(self, revision_id: str) -> bool:
        return self._pins.get(revision_id, 0) > 0

    def touch(self, revision_id: str):
        if revision_id in self._entries:
            self._entries[revision_id] = self._entries.pop(revision_id)

    def insert_evict(self, revision_id: str, bytes_size: int) -> list[str]:
        if bytes_size > self.capacity_bytes:
            raise CapacityImpossible(
                f"{revision_id}: {bytes_size} bytes exceeds cache bound {self.capacity_bytes}"
            )
        if revision_id in self._entries:
            self.total_bytes -= self._entries.pop(revision_id)
        self._entries[revision_id] = bytes_size
        self.total_bytes += bytes_size
        evicted = []
        while len(self._entries) > self.capacity_entries or self.total_bytes > self.capacity_bytes:
            victim = next(
                (
                    k
                    for k in self._entries
                    if not self.pinned(k)
                    and k != revision_id
                    and not (self.protected and self.protected(k))
                ),
                None,
            )
            if victim is None:
                break
            self.total_bytes -= self._entries.pop(victim)
            evicted.append(victim)
        return evicted


class ServingActor:
    """Single serving actor: resolve, load, admit, execute, trace."""

    def __init__(
        self,
        config: ActorConfig,
        loop: EventLoop | None = None,
        catalog: dict[str, RevisionInfo] | None = None,
        file_resolver: Callable[[str], Path] | None = None,
        on_ready: Callable[[str], None] | None = None,
        admission_policy: AdaptiveActivationPolicy | None = None,
    ):
        self.config = config
        self.loop = loop or EventLoop()
        self.catalog = catalog if catalog is not None else {}
        self.file_resolver = file_resolver
        self.on_ready = on_ready
        self.admission_policy = admission_policy
        cap_provider = admission_policy.current_cap if admission_policy else None
        self.lock = EngineLock(self.loop, config.admission_cap, cap_provider)
        self.readiness: dict[str, str] = {}
        protected = None
        if config.gating:
            protected = lambda rev: self.readiness.get(rev) == "ready"
        self.cache = CpuCache(config.cpu_capacity_entries, config.cpu_capacity_bytes, protected)
        self.jobs: dict[str, LoadJob] = {}
        self.job_log: list[LoadJob] = []
        self.loading_count = 0
        self.load_queue: list[LoadJob] = []
        self.running = 0
        self.executing: dict[str, int] = {}  # revision -> running request count
        self.exec_queue: list[tuple[Request, RevisionInfo, RequestTrace]] = []
        self.traces: list[RequestTrace] = []
        self.batch_log: list[tuple[int, tuple[str, ...]]] = []
        self.events: list[tuple[int, str, str]] = []
        self.loaded_revisions: set[str] = set()
        self.rejects = 0
        self.submitted = 0
        self.prewarm_report: PrewarmReport | None = None

    # -- helpers -----------------------------------------------------------

    def _event(self, kind: str, detail: str):
        self.events.append((self.loop.now, kind, detail))

    def _snapshot_batch(self):
        self.batch_log.append((self.loop.now, tuple(sorted(self.executing))))

    def register_revision(self, info: RevisionInfo, name: str | None = None):
        self.catalog[name or info.revision_id] = info
        if self.config.gating:
            self.readiness.setdefault(info.revision_id, "registered")

    def preload(self, names: Iterable[str]):
        """Place revisions in the CPU cache without cost (warm fixtures)."""
        for name in names:
            info = self.catalog[name]
            self.cache.insert_evict(info.revision_id, info.bytes_size)
            self.loaded_revisions.add(info.revision_id)
            if self.config.gating:
                self.readiness[info.revision_id] = "ready"
                if self.on_ready:
                    self.on_ready(info.revision_id)

    # -- resolution ---------------------------------------------------------

    def resolve(self, name: str) -> tuple[str, RevisionInfo]:
        """Classify one request name into a routing decision.

        Returns (path, revision). Raises UnknownPolicy / IncompatibleRevision;
        gating rejections surface as path "reject_not_ready".
        """
        info = self.catalog.get(name)
        if info is None:
            raise UnknownPolicy(name)
        if info.base_id != self.config.base_id:
            raise IncompatibleRevision(f"{info.revision_id}: base_mismatch")
        if info.rank > self.config.max_rank:
            raise IncompatibleRevision(f"{info.revision_id}: rank_exceeds_limit")
        rev = info.revision_id
        if self.config.gating:
            state = self.readiness.get(rev, "absent")
            if state != "ready":
                return ("reject_not_ready", info)
            if rev in self.executing:
                return ("gpu_hit", info)
            return ("ready_path", info)
        if rev in self.executing:
            return ("gpu_hit", info)
        if rev in self.cache:
            return ("cpu_promote", info)
        return ("cold_load", info)

    # -- request intake -----------------------------------------------------

    def submit(self, request: Request):
        self.submitted += 1
        try:
            path, info = self.resolve(request.name)
        except (UnknownPolicy, IncompatibleRevision) as exc:
            self.rejects += 1
            self.traces.append(
                RequestTrace(
                    request.request_id, request.name, "", request.arrival_ms,
                    "rejected", None, None, 0, request.group, type(exc).__name__,
                )
            )
            return
        trace = RequestTrace(
            request.request_id, request.name, info.revision_id, request.arrival_ms,
            path, None, None, 0, request.group,
        )
        if path == "reject_not_ready":
            trace.path = "rejected"
            trace.error = "NotReady"
            self.rejects += 1
            self.traces.append(trace)
            return
        self.traces.append(trace)
        if path in ("gpu_hit", "ready_path"):
            self.cache.touch(info.revision_id)
            self._queue_execution(request, info, trace)
        elif path == "cpu_promote":
            self.cache.touch(info.revision_id)
            self._promote(request, info, trace)
        else:  # cold_load
            try:
                self._join_cold_load(request, info, trace)
            except ColdLoadRejected:
                trace.path = "rejected"
                trace.error = "ColdLoadRejected"
                self.rejects += 1
                self._event("load_rejected", info.revision_id)

    def _promote(self, request: Request, info: RevisionInfo, trace: RequestTrace):
        # promotion is batch-scheduler work, not cold activation: it rides the
        # work lane so admission control protects it from cold bursts
        self.cache.pin(info.revision_id)
        start = self.loop.now

        def granted():
            def finish():
                trace.load_ms = self.loop.now - start
                self.cache.unpin(info.revision_id)
                self._event("promote_done", info.revision_id)
                self.lock.release()
                self._queue_execution(request, info, trace)

            self._event("promote_start", info.revision_id)
            self.loop.schedule(self.config.latency.promote_ms, finish)

        self.lock.request("work", granted)

    # -- cold loading ---------------------------------------------------------

    def enqueue_cold_load(self, info: RevisionInfo, waiter=None, internal: bool = False) -> LoadJob:
        """Single-flight load with bounded in-flight and queue occupancy."""
        job = self.jobs.get(info.revision_id)
        if job is not None and job.state in ("queued", "loading"):
            if waiter is not None:
                job.waiters.append(waiter)
            return job
        job = LoadJob(info.revision_id, "queued", self.loop.now, info=info, internal=internal)
        if waiter is not None:
            job.waiters.append(waiter)
        self.job_log.append(job)
        if self.loading_count < self.config.max_inflight:
            self._start_load(job)
        elif len(self.load_queue) < self.config.queue_depth:
            self.load_queue.append(job)
            self.jobs[info.revision_id] = job
            self._event("load_queued", info.revision_id)
        else:
            job.state = "rejected"
            raise ColdLoadRejected(info.revision_id)
        return job

    def _start_load(self, job: LoadJob):
        info = job.info
        job.state = "loading"
        self.jobs[info.revision_id] = job
        self.loading_count += 1

        def granted():
            job.start_ms = self.loop.now
            self._event("load_start", info.revision_id)
            slice_ms = self.config.latency.load_slice_ms
            if self.file_resolver is not None:
                t0 = time.monotonic()
                path = self.file_resolver(info.revision_id)
                packfmt.measure_load_slices(path)
                measured = math.ceil((time.monotonic() - t0) * 1000)
                slice_ms = (
                    max(1, measured)
                    + self.config.latency.build_ms
                    + self.config.latency.register_ms
                    + self.config.latency.activate_ms
                )
            self.loop.schedule(slice_ms, lambda: self._finish_load(job))

        self.lock.request("load", granted)

    def _finish_load(self, job: LoadJob):
        info = job.info
        job.state = "done"
        job.end_ms = self.loop.now
        self.loading_count -= 1
        self.loaded_revisions.add(info.revision_id)
        self.cache.insert_evict(info.revision_id, info.bytes_size)
        self._event("load_done", info.revision_id)
        self.lock.release()
        for waiter in job.waiters:
            waiter(job)
        job.waiters.clear()
        if self.load_queue:
            self._start_load(self.load_queue.pop(0))

    def _join_cold_load(self, request: Request, info: RevisionInfo, trace: RequestTrace):
        def on_done(_job: LoadJob):
            trace.load_ms = self.loop.now - request.arrival_ms
            self._queue_execution(request, info, trace)

        self.enqueue_cold_load(info, waiter=on_done)

    # -- prewarm --------------------------------------------------------------

    def prewarm(self, names: Iterable[str], backoff_start_ms: int = 1000, backoff_cap_ms: int = 10_000):
        """Load revisions through the admitted cold path, then mark them ready.

        Queue-full rejections retry internally with exponential backoff;
        they never surface to callers.
        """
        infos = [self.catalog[n] for n in names]
        report = PrewarmReport(span_ms=0, started_ms=self.loop.now)
        self.prewarm_report = report
        if not infos:
            return report
        pending = {info.revision_id for info in infos}

        def mark_ready(info: RevisionInfo):
            def on_done(_job: LoadJob):
                self.readiness[info.revision_id] = "ready"
                report.activation_ms[info.revision_id] = self.loop.now
                pending.discard(info.revision_id)
                report.span_ms = self.loop.now - report.started_ms
                self._event("prewarm_ready", info.revision_id)
                if self.on_ready:
                    self.on_ready(info.revision_id)

            return on_done

        def try_enqueue(info: RevisionInfo, backoff: int):
            if info.revision_id in self.cache:
                mark_ready(info)(None)
                return
            try:
                self.readiness.setdefault(info.revision_id, "registered")
                self.readiness[info.revision_id] = "prewarming"
                self.enqueue_cold_load(info, waiter=mark_ready(info), internal=True)
            except ColdLoadRejected:
                report.retries += 1
                self.loop.schedule(backoff, lambda: try_enqueue(info, min(backoff * 2, backoff_cap_ms)))

        for info in infos:
            try_enqueue(info, backoff_start_ms)
        return report

    # -- execution --------------------------------------------------------------

    def _queue_execution(self, request: Request, info: RevisionInfo, trace: RequestTrace):
        self.exec_queue.append((request, info, trace))
        self._try_admit()

    def _try_admit(self):
        while self.exec_queue:
            _request, info, _trace = self.exec_queue[0]
            distinct = set(self.executing)
            distinct.add(info.revision_id)
            if self.running >= self.config.max_running or len(distinct) > self.config.gpu_window:
                return
            request, info, trace = self.exec_queue.pop(0)
            self._admit(request, info, trace)

    def _admit(self, request: Request, info: RevisionInfo, trace: RequestTrace):
        self.running += 1
        self.executing[info.revision_id] = self.executing.get(info.revision_id, 0) + 1
        self.cache.pin(info.revision_id)
        self._snapshot_batch()

        def batch_formed():
            self._event("batch_formed", request.request_id)
            self.lock.release()
            self.loop.schedule(self.config.latency.prefill_ms, decode_begins)

        def decode_begins():
            trace.ttft_ms = self.loop.now - request.arrival_ms
            self._event("decode_start", request.request_id)
            decode_ms = request.output_tokens * self.config.latency.decode_ms_per_token
            self.loop.schedule(decode_ms, complete)

        def complete():
            trace.e2e_ms = self.loop.now - request.arrival_ms
            self._event("complete", request.request_id)
            if self.admission_policy is not None and trace.ttft_ms is not None:
                self.admission_policy.observe(trace.ttft_ms)
            self.running -= 1
            count = self.executing[info.revision_id] - 1
            if count:
                self.executing[info.revision_id] = count
            else:
                del self.executing[info.revision_id]
            self.cache.unpin(info.revision_id)
            self._snapshot_batch()
            self._try_admit()

        self.lock.request("work", batch_formed)

    # -- driving ------------------------------------------------------------------

    def step_engine(self, ticks: int = 1) -> list[tuple[int, str, str]]:
        """Advance the clock by `ticks` ms and return events from the window."""
        before = len(self.events)
        self.loop.run(until_ms=self.loop.now + ticks)
        return self.events[before:]

    def drain(self):
        self.loop.run()

    def stats(self) -> dict:
        max_distinct = max((len(s) for _t, s in self.batch_log), default=0)
        return {
            "loaded_count": len(self.loaded_revisions),
            "max_batch_distinct": max_distinct,
            "rejects": self.rejects,
            "submitted": self.submitted,
            "completed": sum(1 for t in self.traces if t.ok),
            "cache_entries": len(self.cache),
            "prewarm_span_ms": self.prewarm_report.span_ms if self.prewarm_report else 0,
            "prewarm_retries": self.prewarm_report.retries if self.prewarm_report else 0,
        }


def synthetic_catalog(names: Iterable[str], base_id: str = "base", bytes_size: int = 1 << 20) -> dict[str, RevisionInfo]:
    return {name: RevisionInfo(f"rev/{name}", base_id, 1, bytes_size) for name in names}


# -- scenario runner ----------------------------------------------------------


@dataclass
class ScenarioResult:
    traces: list[RequestTrace]
    stats: dict
    per_target: list[dict] | None = None
    prewarm: PrewarmReport | None = None


READY_TOUCH_DELAY_MS = 500


def run_scenario(
    actor_config: ActorConfig,
    spec,
    seed: int | None = None,
    mode: str = "simulated",
    file_resolver: Callable[[str], Path] | None = None,
) -> ScenarioResult:
    """Drive one traffic spec against one actor and collect traces.

    Simulated mode is deterministic per seed. Real-file mode swaps the
    fetch slice for actual packed-file reads through `file_resolver`.
    """
    from . import loadgen

    if mode not in ("simulated", "real-file", "real_file"):
        raise ScenarioError(f"unknown mode {mode!r}")
    if mode != "simulated" and file_resolver is None:
        raise ScenarioError("real-file mode needs a file resolver")
    resolver = file_resolver if mode != "simulated" else None
    if seed is not None and spec.seed != seed:
        spec = loadgen.TrafficSpec(**{**spec.to_json(), "seed": seed})

    if spec.kind in ("hotset_ladder", "unique_ladder"):
        return _run_ladder(actor_config, spec, resolver)
    if spec.kind == "hot_reload":
        return _run_hot_reload(actor_config, spec, resolver)

    arrivals = loadgen.gen_trace(spec)
    names = sorted({a.name for a in arrivals})
    actor = ServingActor(actor_config, catalog=synthetic_catalog(names, actor_config.base_id),
                         file_resolver=resolver)
    if spec.kind == "poisson":
        actor.preload(names)  # the open-loop sweep measures warmed revisions
    requests = [
        Request(a.request_id, a.name, a.arrival_ms, group=a.group) for a in arrivals
    ]
    run_requests(actor, requests)
    duration_s = spec.duration_s if spec.kind == "poisson" else None
    metrics = loadgen.compute_metrics(
        actor.traces, slo_ms=spec.slo_ms, stall_ms=spec.stall_ms, duration_s=duration_s
    )
    stats = actor.stats()
    stats["metrics"] = metrics.to_json()
    return ScenarioResult(actor.traces, stats)


def _run_ladder(actor_config: ActorConfig, spec, resolver) -> ScenarioResult:
    """One fresh actor per rung; report the loaded count at each target."""
    from . import loadgen

    arrivals = loadgen.gen_trace(spec)
    by_target: dict[str, list] = {}
    for a in arrivals:
        by_target.setdefault(a.group, []).append(a)
    per_target = []
    all_traces: list[RequestTrace] = []
    for group in by_target:
        target = int(group.rsplit("-", 1)[1])
        rung = by_target[group]
        names = sorted({a.name for a in rung})
        actor = ServingActor(
            actor_config, catalog=synthetic_catalog(names, actor_config.base_id),
            file_resolver=resolver,
        )
        requests = [Request(a.request_id, a.name, a.arrival_ms, group=a.group) for a in rung]
        run_requests(actor, requests)
        metrics = loadgen.compute_metrics(actor.traces, slo_ms=spec.slo_ms, stall_ms=spec.stall_ms)
        stats = actor.stats()
        per_target.append(
            {
                "target": target,
                "loaded_count": stats["loaded_count"],
                "ttft_p95": metrics.ttft_p95,
                "completed": stats["completed"],
                "rejects": stats["rejects"],
            }
        )
        all_traces.extend(actor.traces)
    per_target.sort(key=lambda r: r["target"])
    summary = {
        "per_target": per_target,
        "metrics": loadgen.compute_metrics(all_traces, slo_ms=spec.slo_ms).to_json(),
    }
    return ScenarioResult(all_traces, summary, per_target=per_target)


def _run_hot_reload(actor_config: ActorConfig, spec, resolver) -> ScenarioResult:
    """The three rollout modes are pure config over one scenario shape."""
    from . import loadgen

    overrides = {
        "immediate": {"gating": False, "admission_cap": None},
        "admitted": {"gating": False, "admission_cap": 1},
        "two_phase": {"gating": True, "admission_cap": 1},
    }[spec.rollout_mode]
    cfg_doc = {**actor_config.__dict__, **overrides}
    cfg_doc["latency"] = actor_config.latency
    config = ActorConfig(**cfg_doc)

    warm_names = [f"warm-{i:03d}" for i in range(spec.warm_count)]
    new_names = [f"new-{i:03d}" for i in range(spec.new_count)]
    catalog = synthetic_catalog(warm_names, config.base_id)
    new_infos = synthetic_catalog(new_names, config.base_id)

    arrivals = loadgen.gen_trace(spec)
    deferred = {a.name: a for a in arrivals if a.trigger == "ready"}
    timed = [a for a in arrivals if a.trigger is None]

    actor = ServingActor(config, catalog=catalog, file_resolver=resolver)
    actor.preload(warm_names)
    rev_to_name = {info.revision_id: name for name, info in new_infos.items()}

    def fire_ready(revision_id: str):
        name = rev_to_name.get(revision_id)
        a = deferred.pop(name, None) if name else None
        if a is not None:
            arrival = actor.loop.now + READY_TOUCH_DELAY_MS
            actor.loop.schedule(
                READY_TOUCH_DELAY_MS,
                lambda: actor.submit(Request(a.request_id, a.name, arrival, group=a.group)),
            )

    actor.on_ready = fire_ready

    def register_new():
        for name in new_names:
            actor.register_revision(new_infos[name], name=name)
        if spec.rollout_mode == "two_phase":
            actor.prewarm(new_names)

    actor.loop.schedule(spec.reload_at_ms, register_new)
    requests = [Request(a.request_id, a.name, a.arrival_ms, group=a.group) for a in timed]
    run_requests(actor, requests)

    warm_traces = [t for t in actor.traces if t.group == "warm"]
    new_traces = [t for t in actor.traces if t.group == "new"]
    post_warm = [t for t in warm_traces if t.arrival_ms >= spec.reload_at_ms]
    stats = actor.stats()
    stats["metrics"] = loadgen.compute_metrics(actor.traces, slo_ms=spec.slo_ms, stall_ms=spec.stall_ms).to_json()
    stats["warm_metrics"] = loadgen.compute_metrics(post_warm, slo_ms=spec.slo_ms, stall_ms=spec.stall_ms).to_json()
    stats["new_metrics"] = loadgen.compute_metrics(new_traces, slo_ms=spec.slo_ms, stall_ms=spec.stall_ms).to_json()
    stats["rollout_mode"] = spec.rollout_mode
    return ScenarioResult(actor.traces, stats, prewarm=actor.prewarm_report)


def run_requests(actor: ServingActor, requests: list[Request], until_ms: int | None = None):
    """Feed arrivals into the loop and run to completion."""
    for req in requests:
        actor.loop.schedule(req.arrival_ms - actor.loop.now, _submitter(actor, req))
    actor.loop.run(until_ms=until_ms)
    if until_ms is None:
        actor.drain()
    return actor.traces


def _submitter(actor: ServingActor, req: Request):
    return lambda: actor.submit(req)
