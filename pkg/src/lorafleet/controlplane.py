"""Client-facing control plane: pollable operations, admission, eviction.

Submissions are durable before execution; completed results are durable
and survive restarts. One logical assigner runs inside tick(): ops are
admitted FIFO per (base, role) class onto compatible registered workers,
and execute synchronously at desk scale.
"""

from __future__ import annotations

import time
import uuid
import zlib
from dataclasses import dataclass
from typing import Callable

from . import packfmt, trainersim
from .lifecycle import ActorDescriptor, Lifecycle, LifecycleError, SessionToken
from .metastore import MetaStore
from .servesim import ActorConfig, Request, RevisionInfo, ServingActor

OP_KINDS = (
    "create_policy",
    "train_step",
    "export",
    "sample",
    "register_adapters",
    "generate",
    "audit",
)
LOCAL_KINDS = frozenset({"create_policy", "audit"})
ROLE_FOR_KIND = {
    "train_step": "trainer",
    "export": "trainer",
    "sample": "sampler",
    "generate": "sampler",
    "register_adapters": "sampler",
}
TERMINAL = frozenset({"committed", "failed", "rejected"})

DEFAULT_IDLE_EVICT_S = 300.0


class ControlPlaneError(Exception):
    code = "ControlPlaneError"
    retryable = False


class SchemaInvalid(ControlPlaneError):
    code = "SchemaInvalid"


class UnknownOp(ControlPlaneError):
    code = "UnknownOp"


class NoCompatibleWorkerClass(ControlPlaneError):
    code = "NoCompatibleWorkerClass"


@dataclass
class WorkerRegistration:
    worker_id: str
    role: str  # trainer | sampler
    base_id: str
    max_rank: int
    supported_modules: frozenset[str]
    capacity: int = 1
    last_active: float = 0.0

    def to_json(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "role": self.role,
            "base_id": self.base_id,
            "max_rank": self.max_rank,
            "supported_modules": sorted(self.supported_modules),
            "capacity": self.capacity,
            "last_active": self.last_active,
        }


@dataclass
class ServiceOp:
    op_id: str
    kind: str
    payload: dict
    status: str = "queued"  # queued -> running -> committed|failed; queued -> rejected
    result: dict | None = None
    error: str | None = None
    idempotency_key: str | None = None
    assigned_worker: str | None = None
    submit_index: int = 0


_SCHEMAS: dict[str, set[str]] = {
    "create_policy": {"base_id", "rank", "target_modules"},
    "train_step": {"policy_id"},
    "export": {"policy_id"},
    "sample": set(),  # policy_id or revision_id, checked below
    "generate": set(),
    "register_adapters": {"revision_ids", "actor_id"},
    "audit": {"path"},
}


def validate_payload(kind: str, payload: dict):
    if kind not in OP_KINDS:
        raise SchemaInvalid(f"unknown op kind {kind!r}")
    if not isinstance(payload, dict):
        raise SchemaInvalid("payload must be an object")
    missing = _SCHEMAS[kind] - payload.keys()
    if missing:
        raise SchemaInvalid(f"{kind}: missing fields {sorted(missing)}")
    if kind in ("sample", "generate") and not ({"policy_id", "revision_id"} & payload.keys()):
        raise SchemaInvalid(f"{kind}: needs policy_id or revision_id")
    if kind == "create_policy":
        if not isinstance(payload["rank"], int) or payload["rank"] < 1:
            raise SchemaInvalid("create_policy: rank must be a positive integer")
        if not payload["target_modules"]:
            raise SchemaInvalid("create_policy: target_modules must be non-empty")


class ControlPlane:
    def __init__(self, root, clock: Callable[[], float] = time.time, idle_evict_s: float = DEFAULT_IDLE_EVICT_S):
        self.clock = clock
        self.idle_evict_s = idle_evict_s
        self.store = MetaStore(root, clock=clock)
        self.lifecycle = Lifecycle(self.store, clock=clock)
        self.workers: dict[str, WorkerRegistration] = {}
        self.ops: dict[str, ServiceOp] = {}
        self._by_idem: dict[str, str] = {}
        self._submit_counter = 0
        self._trainers: dict[str, trainersim.TrainerWorker] = {}
        self._samplers: dict[str, ServingActor] = {}
        self._sessions: dict[tuple[str, str], SessionToken] = {}  # (worker, policy)
        self.counters = {
            "submitted": 0,
            "committed": 0,
            "failed": 0,
            "rejected": 0,
            "assignments": 0,
            "evictions": 0,
        }
        self._recover_ops()

    # -- durability ---------------------------------------------------------

    def _recover_ops(self):
        for entry in self.store.list_visible("op_result"):
            doc = entry.meta
            op = self.ops.get(entry.subject_id)
            if op is None:
                op = ServiceOp(
                    op_id=entry.subject_id,
                    kind=doc["kind"],
                    payload=doc.get("payload", {}),
                    idempotency_key=doc.get("idempotency_key"),
                    submit_index=doc.get("submit_index", 0),
                )
                self.ops[op.op_id] = op
            if doc["phase"] == "terminal":
                op.status = doc["status"]
                op.result = doc.get("result")
                op.error = doc.get("error")
            if op.idempotency_key:
                self._by_idem[op.idempotency_key] = op.op_id
        self._submit_counter = max(
            (op.submit_index for op in self.ops.values()), default=-1
        ) + 1

    def _persist(self, op: ServiceOp, phase: str):
        meta = {
            "phase": phase,
            "kind": op.kind,
            "status": op.status,
            "submit_index": op.submit_index,
        }
        if phase == "queued":
            meta["payload"] = op.payload
            if op.idempotency_key:
                meta["idempotency_key"] = op.idempotency_key
        else:
            meta["result"] = op.result
            meta["error"] = op.error
        attempt = self.store.begin_attempt(op.op_id, "op_result")
        self.store.commit(op.op_id, attempt, "op_result", op.op_id, meta=meta)
        if attempt.directory.exists() and not any(attempt.directory.iterdir()):
            attempt.directory.rmdir()

    # -- client surface -------------------------------------------------------

    def submit(self, kind: str, payload: dict, idempotency_key: str | None = None) -> str:
        validate_payload(kind, payload)
        if idempotency_key and idempotency_key in self._by_idem:
            return self._by_idem[idempotency_key]
        op = ServiceOp(
            op_id=f"op/{uuid.uuid4().hex}",
            kind=kind,
            payload=payload,
            idempotency_key=idempotency_key,
            submit_index=self._submit_counter,
        )
        self._submit_counter += 1
        self.ops[op.op_id] = op
        if idempotency_key:
            self._by_idem[idempotency_key] = op.op_id
        self._persist(op, "queued")
        self.counters["submitted"] += 1
        return op.op_id

    def poll(self, op_id: str) -> dict:
        op = self.ops.get(op_id)
        if op is None:
            raise UnknownOp(op_id)
        doc = {"op_id": op.op_id, "status": op.status}
        if op.result is not None:
            doc["result"] = op.result
        if op.error is not None:
            doc["error"] = op.error
        return doc

    # -- workers ----------------------------------------------------------------

    def register_worker(
        self,
        worker_id: str,
        role: str,
        base_id: str,
        max_rank: int,
        supported_modules,
        capacity: int = 1,
    ) -> WorkerRegistration:
        if role not in ("trainer", "sampler"):
            raise SchemaInvalid(f"unknown role {role!r}")
        reg = WorkerRegistration(
            worker_id, role, base_id, max_rank, frozenset(supported_modules), capacity,
            last_active=self.clock(),
        )
        self.workers[worker_id] = reg
        return reg

    def deregister_worker(self, worker_id: str):
        self.workers.pop(worker_id, None)
        self._trainers.pop(worker_id, None)
        self._samplers.pop(worker_id, None)
        self._sessions = {
            key: tok for key, tok in self._sessions.items() if key[0] != worker_id
        }

    def evict_idle(self, threshold_s: float | None = None) -> list[str]:
        """Drop workers idle past the threshold; durable state stays listable."""
        threshold = self.idle_evict_s if threshold_s is None else threshold_s
        now = self.clock()
        evicted = [
            w.worker_id
            for w in self.workers.values()
            if now - w.last_active >= threshold
        ]
        for worker_id in evicted:
            for (wid, policy_id), token in list(self._sessions.items()):
                if wid == worker_id:
                    try:
                        self.lifecycle.release_session(token)
                    except LifecycleError:
                        pass
                    del self._sessions[(wid, policy_id)]
            self.deregister_worker(worker_id)
            self.counters["evictions"] += 1
        return evicted

    # -- admission and execution ---------------------------------------------

    def _op_requirements(self, op: ServiceOp) -> tuple[str, str, int, frozenset[str]]:
        """(role, base_id, rank, modules) this op needs from a worker."""
        role = ROLE_FOR_KIND[op.kind]
        revision_id = op.payload.get("revision_id")
        if revision_id is None and op.payload.get("revision_ids"):
            revision_id = op.payload["revision_ids"][0]
        if revision_id is not None:
            rev = self.lifecycle.get_revision(revision_id)
            shape = rev.adapter_shape
            return role, rev.base_id, shape.rank, shape.target_modules
        record = self.lifecycle.get_policy(op.payload["policy_id"])
        shape = record.adapter_shape
        return role, record.base_id, shape.rank, shape.target_modules

    def admit(self, op: ServiceOp) -> WorkerRegistration | None:
        """Pick a compatible free worker, or None to stay queued.

        Raises NoCompatibleWorkerClass when workers for this (role, base)
        exist but none could ever satisfy the shape; with no such workers
        registered at all the op waits for a future registration.
        """
        role, base_id, rank, modules = self._op_requirements(op)
        klass = [w for w in self.workers.values() if w.role == role and w.base_id == base_id]
        capable = [
            w for w in klass if rank <= w.max_rank and modules <= w.supported_modules
        ]
        if klass and not capable:
            raise NoCompatibleWorkerClass(
                f"{op.kind} needs base={base_id} rank<={rank}; no registered {role} admits it"
            )
        busy = {o.assigned_worker for o in self.ops.values() if o.status == "running"}
        for worker in sorted(capable, key=lambda w: w.worker_id):
            if worker.worker_id not in busy:
                return worker
        return None

    def tick(self) -> int:
        """One assigner pass: admit and run queued ops in FIFO order per class."""
        assigned = 0
        queued = sorted(
            (op for op in self.ops.values() if op.status == "queued"),
            key=lambda o: o.submit_index,
        )
        for op in queued:
            if op.kind in LOCAL_KINDS:
                self._run(op, worker=None)
                assigned += 1
                continue
            try:
                worker = self.admit(op)
            except NoCompatibleWorkerClass as exc:
                op.status = "rejected"
                op.error = exc.code
                self._persist(op, "terminal")
                self.counters["rejected"] += 1
                continue
            except LifecycleError as exc:
                op.status = "failed"
                op.error = f"{type(exc).__name__}: {exc}"
                self._persist(op, "terminal")
                self.counters["failed"] += 1
                continue
            if worker is None:
                continue
            self._run(op, worker)
            assigned += 1
        return assigned

    def _run(self, op: ServiceOp, worker: WorkerRegistration | None):
        op.status = "running"
        op.assigned_worker = worker.worker_id if worker else None
        if worker:
            self.counters["assignments"] += 1
            worker.last_active = self.clock()
        try:
            op.result = self._execute(op, worker)
            op.status = "committed"
            self.counters["committed"] += 1
        except (LifecycleError, ControlPlaneError, trainersim.TrainerError,
                packfmt.PackedFormatError, OSError) as exc:
            op.status = "failed"
            op.error = f"{type(exc).__name__}: {exc}"
            self.counters["failed"] += 1
        self._persist(op, "terminal")
        if worker:
            worker.last_active = self.clock()

    # -- op bodies -----------------------------------------------------------

    def _trainer_sim(self, worker: WorkerRegistration) -> trainersim.TrainerWorker:
        sim = self._trainers.get(worker.worker_id)
        if sim is None:
            sim = trainersim.TrainerWorker(
                worker.worker_id,
                worker.base_id,
                worker.max_rank,
                tuple(sorted(worker.supported_modules)),
            )
            self._trainers[worker.worker_id] = sim
        return sim

    def _sampler_actor(self, worker: WorkerRegistration) -> ServingActor:
        actor = self._samplers.get(worker.worker_id)
        if actor is None:
            actor = ServingActor(
                ActorConfig(actor_id=worker.worker_id, base_id=worker.base_id,
                            max_rank=worker.max_rank)
            )
            self._samplers[worker.worker_id] = actor
        return actor

    def _session_for(self, worker: WorkerRegistration, policy_id: str) -> SessionToken:
        key = (worker.worker_id, policy_id)
        token = self._sessions.get(key)
        if token is not None:
            try:
                return self.lifecycle.heartbeat(token)
            except LifecycleError:
                del self._sessions[key]
        token = self.lifecycle.acquire_session(policy_id, worker.worker_id)
        self._sessions[key] = token
        return token

    def _execute(self, op: ServiceOp, worker: WorkerRegistration | None) -> dict:
        kind = op.kind
        payload = op.payload
        if kind == "create_policy":
            record = self.lifecycle.create_policy(
                payload["base_id"], payload["rank"], payload["target_modules"]
            )
            return {"policy_id": record.policy_id}

        if kind == "audit":
            report = packfmt.audit(
                payload["path"], payload.get("samples", 16), payload.get("seed", 0)
            )
            return {
                "keys": report.keys,
                "groups": report.groups,
                "copied": report.copied,
                "sampled_ok": report.sampled_ok,
                "errors": report.errors,
            }

        if kind == "train_step":
            record = self.lifecycle.get_policy(payload["policy_id"])
            session = self._session_for(worker, record.policy_id)
            sim = self._trainer_sim(worker)
            shape = trainersim.PolicyShape(
                record.policy_id, record.adapter_shape.rank,
                record.adapter_shape.target_modules,
            )
            if sim.active is None or sim.active[1].policy_id != record.policy_id:
                sim.switch_policy(session.token, shape)
            state = sim.run_update(session.token, payload.get("batch_seed", 0))
            return {
                "policy_id": record.policy_id,
                "scheduler_position": state.scheduler_position,
            }

        if kind == "export":
            record = self.lifecycle.get_policy(payload["policy_id"])
            session = self._session_for(worker, record.policy_id)
            sim = self._trainers.get(worker.worker_id)
            step = payload.get("step")
            if step is None:
                step = (
                    sim.state.scheduler_position
                    if sim is not None and sim.state is not None
                    else 0
                )
            manifest = packfmt.synthetic_manifest(1, 2, 1, other=2)
            payload_seed = zlib.crc32(f"{record.policy_id}:{step}".encode())
            payloads = packfmt.synthetic_payloads(manifest, payload_seed)
            revision = self.lifecycle.export_revision(session, step, manifest, payloads, op_id=op.op_id)
            return {"revision_id": revision.revision_id, "step": revision.step}

        if kind in ("sample", "generate"):
            if "revision_id" in payload:
                revision = self.lifecycle.get_revision(payload["revision_id"])
            else:
                revision = self.lifecycle.latest_revision(payload["policy_id"])
                if revision is None:
                    raise SchemaInvalid(f"{payload['policy_id']} has no exported revision")
            actor_desc = ActorDescriptor(
                worker.base_id, worker.max_rank, worker.supported_modules
            )
            compat = self.lifecycle.check_compatibility(revision, actor_desc)
            if not compat.ok:
                raise SchemaInvalid(f"incompatible revision: {compat.reason}")
            actor = self._sampler_actor(worker)
            if revision.revision_id not in actor.catalog:
                actor.register_revision(
                    RevisionInfo(revision.revision_id, revision.base_id,
                                 revision.adapter_shape.rank),
                    name=revision.revision_id,
                )
            request = Request(
                f"{op.op_id}:0", revision.revision_id, actor.loop.now,
                output_tokens=payload.get("output_tokens", 64),
            )
            actor.submit(request)
            actor.drain()
            trace = actor.traces[-1]
            return {
                "revision_id": revision.revision_id,
                "path": trace.path,
                "ttft_ms": trace.ttft_ms,
                "e2e_ms": trace.e2e_ms,
                "load_ms": trace.load_ms,
            }

        if kind == "register_adapters":
            registered = []
            for revision_id in payload["revision_ids"]:
                self.lifecycle.get_revision(revision_id)  # must be committed
                if self.lifecycle.readiness_state(payload["actor_id"], revision_id) == "absent":
                    self.lifecycle.transition_readiness(payload["actor_id"], revision_id, "registered")
                registered.append(revision_id)
            return {"registered": registered}

        raise SchemaInvalid(kind)

    # -- metrics -----------------------------------------------------------------

    def metrics(self) -> dict:
        by_status: dict[str, int] = {}
        for op in self.ops.values():
            by_status[op.status] = by_status.get(op.status, 0) + 1
        return {
            **self.counters,
            "queue_depth": by_status.get("queued", 0),
            "ops_by_status": by_status,
            "workers": len(self.workers),
        }
