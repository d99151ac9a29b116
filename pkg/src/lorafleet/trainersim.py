"""Simulated resident-base trainers.

Models the lifecycle mechanics only: full five-component training-state
swaps, pad/mask adapter slots over a constant resident base, reassembly of
sharded adapter views into one serving manifest, and sequential versus
concurrent schedule timelines. No numerics anywhere; payloads are
pseudorandom bytes keyed by (policy, step).
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass

from . import packfmt

SLOT_BYTES_PER_ROW_MODULE = 16

_EXPERT_SEG = re.compile(r"\.experts\.(\d+)\.")
_SHARED_SEG = ".shared_expert."
_REPLICATED_SEG = ".norm."


class TrainerError(Exception):
    pass


class StateDigestMismatch(TrainerError):
    pass


class SessionViolation(TrainerError):
    pass


class NoSession(TrainerError):
    pass


class MissingSlice(TrainerError):
    pass


class OverlappingOwnership(TrainerError):
    pass


class ReplicaDivergence(TrainerError):
    pass


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class TrainingState:
    """The five components a policy switch must save and restore."""

    adapter_tensors: bytes
    optimizer_moments: bytes
    scheduler_position: int
    accumulated_gradients: bytes
    rollout_records: list[str]

    def digests(self) -> dict[str, str]:
        return {
            "adapter_tensors": _digest(self.adapter_tensors),
            "optimizer_moments": _digest(self.optimizer_moments),
            "scheduler_position": _digest(str(self.scheduler_position).encode()),
            "accumulated_gradients": _digest(self.accumulated_gradients),
            "rollout_records": _digest("\n".join(self.rollout_records).encode()),
        }


def fresh_state(policy_id: str, rank: int, modules: frozenset[str]) -> TrainingState:
    rng = random.Random(f"init:{policy_id}")
    size = rank * len(modules) * SLOT_BYTES_PER_ROW_MODULE
    return TrainingState(
        adapter_tensors=rng.randbytes(size),
        optimizer_moments=rng.randbytes(2 * size),
        scheduler_position=0,
        accumulated_gradients=bytes(size),
        rollout_records=[],
    )


@dataclass
class SwitchReport:
    saved_policy: str | None
    restored_policy: str
    saved_digests: dict[str, str] | None
    restored_digests: dict[str, str]
    base_resident_bytes: int


class StateStore:
    """Trainer-side persistence for per-policy training state."""

    def __init__(self):
        self._states: dict[str, TrainingState] = {}
        self._digests: dict[str, dict[str, str]] = {}

    def save(self, policy_id: str, state: TrainingState) -> dict[str, str]:
        digests = state.digests()
        self._states[policy_id] = TrainingState(
            state.adapter_tensors,
            state.optimizer_moments,
            state.scheduler_position,
            state.accumulated_gradients,
            list(state.rollout_records),
        )
        self._digests[policy_id] = digests
        return digests

    def load(self, policy_id: str) -> tuple[TrainingState, dict[str, str]]:
        state = self._states[policy_id]
        loaded = TrainingState(
            state.adapter_tensors,
            state.optimizer_moments,
            state.scheduler_position,
            state.accumulated_gradients,
            list(state.rollout_records),
        )
        digests = loaded.digests()
        if digests != self._digests[policy_id]:
            raise StateDigestMismatch(policy_id)
        return loaded, digests

    def has(self, policy_id: str) -> bool:
        return policy_id in self._states

    def last_digests(self, policy_id: str) -> dict[str, str] | None:
        return self._digests.get(policy_id)


@dataclass
class PolicyShape:
    policy_id: str
    rank: int
    modules: frozenset[str]


class TrainerWorker:
    """One resident base; adapter slots allocated at maximum shape.

    The slot is a (max_rank x modules) byte grid. A policy with a smaller
    rank or module set writes only inside its active region; everything
    outside stays zero after every update.
    """

    def __init__(
        self,
        worker_id: str,
        base_id: str,
        max_rank: int,
        module_order: tuple[str, ...],
        base_resident_bytes: int = 1 << 30,
        state_store: StateStore | None = None,
    ):
        self.worker_id = worker_id
        self.base_id = base_id
        self.max_rank = max_rank
        self.module_order = module_order
        self.base_resident_bytes = base_resident_bytes
        self.store = state_store or StateStore()
        self.slot = bytearray(max_rank * len(module_order) * SLOT_BYTES_PER_ROW_MODULE)
        self.active: tuple[str, PolicyShape] | None = None  # (session token, shape)
        self.state: TrainingState | None = None

    def _cell(self, row: int, module_idx: int) -> slice:
        start = (row * len(self.module_order) + module_idx) * SLOT_BYTES_PER_ROW_MODULE
        return slice(start, start + SLOT_BYTES_PER_ROW_MODULE)

    def _write_active_region(self, shape: PolicyShape, payload: bytes):
        self.slot[:] = bytes(len(self.slot))
        pos = 0
        for row in range(shape.rank):
            for mi, module in enumerate(self.module_order):
                if module in shape.modules:
                    chunk = payload[pos : pos + SLOT_BYTES_PER_ROW_MODULE]
                    pos += SLOT_BYTES_PER_ROW_MODULE
                    self.slot[self._cell(row, mi)] = chunk.ljust(SLOT_BYTES_PER_ROW_MODULE, b"\0")

    def inactive_region_zero(self) -> bool:
        if self.active is None:
            return all(b == 0 for b in self.slot)
        shape = self.active[1]
        for row in range(self.max_rank):
            for mi, module in enumerate(self.module_order):
                if row < shape.rank and module in shape.modules:
                    continue
                if any(self.slot[self._cell(row, mi)]):
                    return False
        return True

    def switch_policy(
        self, restore_token: str, shape: PolicyShape, save_token: str | None = None
    ) -> SwitchReport:
        """Save the active policy's five-component state, restore the next one."""
        if shape.rank > self.max_rank or not shape.modules <= set(self.module_order):
            raise TrainerError(
                f"shape rank={shape.rank} modules={sorted(shape.modules)} exceeds worker limits"
            )
        saved_policy = None
        saved_digests = None
        if self.active is not None and self.state is not None:
            if save_token is not None and self.active[0] != save_token:
                raise SessionViolation(
                    f"active session {self.active[0]} is not {save_token}"
                )
            saved_policy = self.active[1].policy_id
            saved_digests = self.store.save(saved_policy, self.state)
        if self.store.has(shape.policy_id):
            state, restored = self.store.load(shape.policy_id)
        else:
            state = fresh_state(shape.policy_id, shape.rank, shape.modules)
            restored = self.store.save(shape.policy_id, state)
        self.active = (restore_token, shape)
        self.state = state
        self._write_active_region(shape, state.adapter_tensors)
        return SwitchReport(
            saved_policy=saved_policy,
            restored_policy=shape.policy_id,
            saved_digests=saved_digests,
            restored_digests=restored,
            base_resident_bytes=self.base_resident_bytes,
        )

    def run_update(self, session_token: str, batch_seed: int = 0) -> TrainingState:
        """One simulated optimizer step: rewrite the active region only."""
        if self.active is None or self.active[0] != session_token:
            raise NoSession(f"worker {self.worker_id} has no session {session_token}")
        shape = self.active[1]
        state = self.state
        assert state is not None
        step = state.scheduler_position + 1
        rng = random.Random(f"update:{shape.policy_id}:{step}:{batch_seed}")
        size = shape.rank * len(shape.modules) * SLOT_BYTES_PER_ROW_MODULE
        # nonzero payload so the masked-region check cannot pass by accident
        payload = bytes(b | 1 for b in rng.randbytes(size))
        state.adapter_tensors = payload
        state.optimizer_moments = rng.randbytes(2 * size)
        state.accumulated_gradients = rng.randbytes(size)
        state.scheduler_position = step
        self._write_active_region(shape, payload)
        self.store.save(shape.policy_id, state)
        return state


# -- sharded export ---------------------------------------------------------


@dataclass
class ShardedAdapterView:
    """Rank-local fragments of one adapter under TP x EP placement."""

    tp: int
    ep: int
    tp_slices: dict[int, dict[str, bytes]]  # tp rank -> dense tensor fragments
    ep_owned_experts: dict[int, set[int]]  # ep rank -> expert ids
    expert_tensors: dict[int, dict[str, bytes]]  # ep rank -> expert tensor payloads
    shared_expert_copies: dict[int, dict[str, bytes]]  # ep rank -> shared tensors
    replicated: dict[int, dict[str, bytes]]  # tp rank -> replicated tensors


def classify_tensor(name: str) -> str:
    if _EXPERT_SEG.search(name):
        return "expert"
    if _SHARED_SEG in name:
        return "shared"
    if _REPLICATED_SEG in name:
        return "replicated"
    return "dense"


def shard_adapter(
    manifest: packfmt.AdapterManifest,
    payloads: dict[str, bytes],
    tp: int,
    ep: int,
) -> ShardedAdapterView:
    """Cut an unsharded adapter into the view a trainer group would hold."""
    tp_slices: dict[int, dict[str, bytes]] = {r: {} for r in range(tp)}
    replicated: dict[int, dict[str, bytes]] = {r: {} for r in range(tp)}
    ep_owned: dict[int, set[int]] = {r: set() for r in range(ep)}
    expert_tensors: dict[int, dict[str, bytes]] = {r: {} for r in range(ep)}
    shared: dict[int, dict[str, bytes]] = {r: {} for r in range(ep)}
    for spec in manifest.tensors:
        data = payloads[spec.name]
        kind = classify_tensor(spec.name)
        if kind == "expert":
            expert_id = int(_EXPERT_SEG.search(spec.name).group(1))
            owner = expert_id % ep
            ep_owned[owner].add(expert_id)
            expert_tensors[owner][spec.name] = data
        elif kind == "shared":
            for r in range(ep):
                shared[r][spec.name] = data
        elif kind == "replicated":
            for r in range(tp):
                replicated[r][spec.name] = data
        else:
            step = len(data) // tp
            for r in range(tp):
                end = (r + 1) * step if r < tp - 1 else len(data)
                tp_slices[r][spec.name] = data[r * step : end]
    return ShardedAdapterView(tp, ep, tp_slices, ep_owned, expert_tensors, shared, replicated)


def export_from_shards(view: ShardedAdapterView) -> dict[str, bytes]:
    """Reassemble one serving payload map from a sharded view.

    Tensor-parallel slices are gathered in rank order, replicated tensors
    are written once after a divergence check, expert tensors come from
    their owner ranks, and shared-expert duplicates collapse to one copy.
    """
    out: dict[str, bytes] = {}

    names = set()
    for frags in view.tp_slices.values():
        names.update(frags)
    for name in sorted(names):
        parts = []
        for r in range(view.tp):
            if name not in view.tp_slices.get(r, {}):
                raise MissingSlice(f"{name}: tp rank {r}")
            parts.append(view.tp_slices[r][name])
        out[name] = b"".join(parts)

    rep_names = set()
    for frags in view.replicated.values():
        rep_names.update(frags)
    for name in sorted(rep_names):
        copies = []
        for r in range(view.tp):
            if name not in view.replicated.get(r, {}):
                raise MissingSlice(f"{name}: replica on tp rank {r}")
            copies.append(view.replicated[r][name])
        if any(c != copies[0] for c in copies[1:]):
            raise ReplicaDivergence(name)
        out[name] = copies[0]

    seen_experts: dict[int, int] = {}
    for rank, owned in view.ep_owned_experts.items():
        for expert_id in owned:
            if expert_id in seen_experts and seen_experts[expert_id] != rank:
                raise OverlappingOwnership(f"expert {expert_id}")
            seen_experts[expert_id] = rank
    for rank in sorted(view.expert_tensors):
        for name, data in view.expert_tensors[rank].items():
            expert_id = int(_EXPERT_SEG.search(name).group(1))
            if seen_experts.get(expert_id) != rank:
                raise OverlappingOwnership(f"{name} provided by non-owner rank {rank}")
            if name in out:
                raise OverlappingOwnership(name)
            out[name] = data

    shared_names = set()
    for copies in view.shared_expert_copies.values():
        shared_names.update(copies)
    for name in sorted(shared_names):
        copies = [
            view.shared_expert_copies[r][name]
            for r in sorted(view.shared_expert_copies)
            if name in view.shared_expert_copies[r]
        ]
        if any(c != copies[0] for c in copies[1:]):
            raise ReplicaDivergence(name)
        out[name] = copies[0]

    return out


# -- schedule simulation ------------------------------------------------------

PHASE_RESOURCES = ("trainer", "sampler", "idle")


@dataclass(frozen=True)
class Phase:
    name: str
    duration_ms: int
    resource: str  # trainer | sampler | idle

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError("phase durations must be positive")
        if self.resource not in PHASE_RESOURCES:
            raise ValueError(f"unknown resource {self.resource!r}")


@dataclass
class PhasePlan:
    policy_id: str
    phases: list[Phase]


@dataclass(frozen=True)
class Span:
    policy_id: str
    phase: str
    start_ms: int
    end_ms: int
    resource: str


@dataclass
class Timeline:
    mode: str
    wall_time_ms: int
    peak_resident_bytes: int
    spans: list[Span]


def simulate_schedule(
    plans: list[PhasePlan],
    mode: str,
    trainers: int = 1,
    samplers: int = 1,
    base_resident_bytes: int = 1 << 30,
) -> Timeline:
    """Run phase plans back-to-back or with greedy cross-policy overlap.

    Concurrent mode is list scheduling on resource availability with FIFO
    tie-break by policy id. Peak resident bytes never change between the
    modes: the same single resident base backs both schedules.
    """
    if mode not in ("sequential", "concurrent"):
        raise ValueError(f"unknown mode {mode!r}")
    spans: list[Span] = []

    if mode == "sequential":
        t = 0
        for plan in sorted(plans, key=lambda p: p.policy_id):
            for phase in plan.phases:
                spans.append(Span(plan.policy_id, phase.name, t, t + phase.duration_ms, phase.resource))
                t += phase.duration_ms
        return Timeline("sequential", t, base_resident_bytes, spans)

    free: dict[str, list[int]] = {
        "trainer": [0] * trainers,
        "sampler": [0] * samplers,
    }
    next_phase = {plan.policy_id: 0 for plan in plans}
    ready_at = {plan.policy_id: 0 for plan in plans}
    by_policy = {plan.policy_id: plan for plan in plans}
    pending = sorted(by_policy)

    while pending:
        # pick the earliest startable phase; FIFO tie-break by policy id
        best = None
        for policy_id in pending:
            plan = by_policy[policy_id]
            phase = plan.phases[next_phase[policy_id]]
            if phase.resource == "idle":
                start = ready_at[policy_id]
                slot = None
            else:
                pool = free[phase.resource]
                slot = min(range(len(pool)), key=lambda i: pool[i])
                start = max(ready_at[policy_id], pool[slot])
            key = (start, policy_id)
            if best is None or key < best[0]:
                best = (key, policy_id, phase, slot)
        _, policy_id, phase, slot = best
        start = best[0][0]
        end = start + phase.duration_ms
        if slot is not None:
            free[phase.resource][slot] = end
        resource_label = phase.resource if slot is None else f"{phase.resource}-{slot}"
        spans.append(Span(policy_id, phase.name, start, end, resource_label))
        ready_at[policy_id] = end
        next_phase[policy_id] += 1
        if next_phase[policy_id] >= len(by_policy[policy_id].phases):
            pending.remove(policy_id)

    wall = max(s.end_ms for s in spans) if spans else 0
    return Timeline("concurrent", wall, base_resident_bytes, spans)


def default_4b_plan() -> list[PhasePlan]:
    """Three-policy GRPO-shaped plan whose concurrent/sequential ratio lands
    near the measured 1.77x for the 4B deployment."""
    phases = [
        Phase("rollout", 35_000, "sampler"),
        Phase("update", 30_000, "trainer"),
        Phase("export", 5_000, "trainer"),
        Phase("eval", 30_000, "idle"),
    ]
    return [PhasePlan(f"policy-{i}", list(phases)) for i in range(3)]
