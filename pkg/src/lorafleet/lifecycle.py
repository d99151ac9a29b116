"""Policy records, immutable adapter revisions, session locks, and readiness.

Everything durable goes through the metastore committer; in-memory views
(session holders, readiness states) are rebuilt from the log on open.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import packfmt
from .metastore import MetaStore, compute_digest

DEFAULT_LEASE_S = 60.0

READINESS_STATES = ("absent", "registered", "prewarming", "ready", "retired")
LEGAL_TRANSITIONS = {
    ("absent", "registered"),
    ("registered", "prewarming"),
    ("prewarming", "ready"),
    ("ready", "retired"),
    ("registered", "retired"),
}

CORRECTION_POLICIES = ("none", "mask_unmapped", "icepop_band")


class LifecycleError(Exception):
    pass


class InvalidShape(LifecycleError):
    pass


class UnknownPolicy(LifecycleError):
    pass


class UnknownRevision(LifecycleError):
    pass


class SessionHeld(LifecycleError):
    def __init__(self, holder: str):
        super().__init__(f"session held by {holder}")
        self.holder = holder


class NoSession(LifecycleError):
    pass


class IllegalTransition(LifecycleError):
    pass


class MissingActivationProof(LifecycleError):
    pass


@dataclass(frozen=True)
class AdapterShape:
    rank: int
    target_modules: frozenset[str]

    def to_json(self) -> dict:
        return {"rank": self.rank, "target_modules": sorted(self.target_modules)}

    @staticmethod
    def from_json(doc: dict) -> "AdapterShape":
        return AdapterShape(doc["rank"], frozenset(doc["target_modules"]))


@dataclass
class PolicyRecord:
    policy_id: str
    base_id: str
    adapter_shape: AdapterShape
    checkpoint_ref: str | None
    revision_ids: list[str]
    session_holder: str | None


@dataclass(frozen=True)
class AdapterRevision:
    revision_id: str
    policy_id: str
    base_id: str
    step: int
    file_ref: str
    manifest_digest: str
    created_seq: int
    adapter_shape: AdapterShape


@dataclass(frozen=True)
class RolloutRecord:
    record_id: str
    policy_id: str
    revision_id: str
    token_count: int
    correction_policy: str
    masked_tokens: tuple[int, ...]
    backend_tag: str


@dataclass(frozen=True)
class ReadinessEntry:
    actor_id: str
    revision_id: str
    state: str
    transitioned_at_ms: int


@dataclass(frozen=True)
class SessionToken:
    policy_id: str
    worker_id: str
    token: str
    expires_at: float


@dataclass(frozen=True)
class ActorDescriptor:
    """Base deployment the serving or rollout side advertises."""

    base_id: str
    max_rank: int
    supported_modules: frozenset[str]
    format_versions: frozenset[int] = frozenset({packfmt.VERSION})


@dataclass(frozen=True)
class CompatResult:
    ok: bool
    reason: str | None = None


class Lifecycle:
    """Adapter lifecycle state machine over one metastore."""

    def __init__(self, store: MetaStore, clock: Callable[[], float] = time.time):
        self.store = store
        self.clock = clock
        self._sessions: dict[str, SessionToken] = {}
        self._readiness: dict[tuple[str, str], ReadinessEntry] = {}
        self._proofs: dict[tuple[str, str], str] = {}
        self._rebuild()

    def _rebuild(self):
        for entry in self.store.list_visible("session"):
            meta = entry.meta
            if meta["action"] == "acquire":
                self._sessions[entry.subject_id] = SessionToken(
                    entry.subject_id, meta["worker"], meta["token"], meta["expires_at"]
                )
            else:
                self._sessions.pop(entry.subject_id, None)
        for entry in self.store.list_visible("readiness"):
            meta = entry.meta
            key = (meta["actor"], meta["revision"])
            self._readiness[key] = ReadinessEntry(
                meta["actor"], meta["revision"], meta["state"], entry.timestamp_ms
            )

    def _meta_commit(self, kind: str, subject_id: str, meta: dict, op_id: str = "lifecycle"):
        attempt = self.store.begin_attempt(op_id, kind)
        try:
            return self.store.commit(op_id, attempt, kind, subject_id, meta=meta)
        finally:
            if attempt.directory.exists() and not any(attempt.directory.iterdir()):
                attempt.directory.rmdir()

    # -- policies ----------------------------------------------------------

    def create_policy(self, base_id: str, rank: int, target_modules: Iterable[str]) -> PolicyRecord:
        modules = frozenset(target_modules)
        if rank < 1 or not modules:
            raise InvalidShape(f"rank={rank}, modules={sorted(modules)}")
        policy_id = f"policy/{uuid.uuid4()}"
        shape = AdapterShape(rank, modules)
        self._meta_commit(
            "policy",
            policy_id,
            {"base_id": base_id, "shape": shape.to_json(), "action": "create"},
        )
        return self.get_policy(policy_id)

    def get_policy(self, policy_id: str) -> PolicyRecord:
        created = self.store.list_visible("policy", policy_id)
        if not created:
            raise UnknownPolicy(policy_id)
        meta = created[0].meta
        revisions = [e.subject_id for e in self.store.list_visible("revision") if e.meta.get("policy_id") == policy_id]
        checkpoints = [e for e in self.store.list_visible("checkpoint") if e.meta.get("policy_id") == policy_id]
        session = self._sessions.get(policy_id)
        holder = None
        if session is not None and session.expires_at > self.clock():
            holder = session.worker_id
        return PolicyRecord(
            policy_id=policy_id,
            base_id=meta["base_id"],
            adapter_shape=AdapterShape.from_json(meta["shape"]),
            checkpoint_ref=checkpoints[-1].subject_id if checkpoints else None,
            revision_ids=revisions,
            session_holder=holder,
        )

    def list_policies(self) -> list[str]:
        return [e.subject_id for e in self.store.list_visible("policy")]

    # -- sessions ----------------------------------------------------------

    def acquire_session(self, policy_id: str, worker_id: str, lease_s: float = DEFAULT_LEASE_S) -> SessionToken:
        if not self.store.list_visible("policy", policy_id):
            raise UnknownPolicy(policy_id)
        with self.store._lock:
            current = self._sessions.get(policy_id)
            if current is not None and current.expires_at > self.clock():
                raise SessionHeld(current.worker_id)
            token = SessionToken(policy_id, worker_id, uuid.uuid4().hex, self.clock() + lease_s)
            self._sessions[policy_id] = token
        self._meta_commit(
            "session",
            policy_id,
            {"action": "acquire", "worker": worker_id, "token": token.token, "expires_at": token.expires_at},
        )
        return token

    def heartbeat(self, session: SessionToken, lease_s: float = DEFAULT_LEASE_S) -> SessionToken:
        self._check_session(session)
        renewed = SessionToken(session.policy_id, session.worker_id, session.token, self.clock() + lease_s)
        self._sessions[session.policy_id] = renewed
        return renewed

    def release_session(self, session: SessionToken, state_ref: str | None = None):
        self._check_session(session)
        self._sessions.pop(session.policy_id, None)
        meta = {"action": "release", "worker": session.worker_id, "token": session.token}
        if state_ref is not None:
            meta["state_ref"] = state_ref
        self._meta_commit("session", session.policy_id, meta)

    def _check_session(self, session: SessionToken):
        current = self._sessions.get(session.policy_id)
        if current is None or current.token != session.token or current.expires_at <= self.clock():
            raise NoSession(f"no live session {session.token} for {session.policy_id}")

    # -- revisions ---------------------------------------------------------

    def export_revision(
        self,
        session: SessionToken,
        step: int,
        manifest: packfmt.AdapterManifest,
        payloads,
        op_id: str = "export",
    ) -> AdapterRevision:
        self._check_session(session)
        policy = self.get_policy(session.policy_id)
        attempt = self.store.begin_attempt(op_id, "revision")
        out = attempt.directory / "adapter.mtpk"
        packfmt.pack(manifest, payloads, out)
        digest = compute_digest([out], None)
        revision_id = f"rev/{session.policy_id.split('/', 1)[1]}/{step}-{digest[:8]}"
        meta = {
            "policy_id": session.policy_id,
            "base_id": policy.base_id,
            "step": step,
            "shape": policy.adapter_shape.to_json(),
            "manifest_digest": digest,
        }
        entry = self.store.commit(
            op_id, attempt, "revision", revision_id, [out], meta=meta
        )
        return self._revision_from_entry(entry)

    def _revision_from_entry(self, entry) -> AdapterRevision:
        return AdapterRevision(
            revision_id=entry.subject_id,
            policy_id=entry.meta["policy_id"],
            base_id=entry.meta["base_id"],
            step=entry.meta["step"],
            file_ref=entry.file_refs[0] if entry.file_refs else "",
            manifest_digest=entry.meta["manifest_digest"],
            created_seq=entry.seq,
            adapter_shape=AdapterShape.from_json(entry.meta["shape"]),
        )

    def get_revision(self, revision_id: str) -> AdapterRevision:
        entry = self.store.last_visible("revision", revision_id)
        if entry is None:
            raise UnknownRevision(revision_id)
        return self._revision_from_entry(entry)

    def latest_revision(self, policy_id: str) -> AdapterRevision | None:
        entries = [e for e in self.store.list_visible("revision") if e.meta.get("policy_id") == policy_id]
        return self._revision_from_entry(entries[-1]) if entries else None

    def verify_revision(self, revision_id: str) -> bool:
        """Recompute the payload digest of a committed revision."""
        rev = self.get_revision(revision_id)
        return compute_digest([Path(rev.file_ref)], None) == rev.manifest_digest

    # -- compatibility -----------------------------------------------------

    def check_compatibility(self, revision: AdapterRevision, actor: ActorDescriptor) -> CompatResult:
        if revision.base_id != actor.base_id:
            return CompatResult(False, "base_mismatch")
        if revision.adapter_shape.rank > actor.max_rank:
            return CompatResult(False, "rank_exceeds_limit")
        if not revision.adapter_shape.target_modules <= actor.supported_modules:
            return CompatResult(False, "unsupported_modules")
        if packfmt.VERSION not in actor.format_versions:
            return CompatResult(False, "format_version_unsupported")
        return CompatResult(True)

    # -- rollout records ----------------------------------------------------

    def record_rollout(
        self,
        policy_id: str,
        revision_id: str,
        token_count: int,
        route_metadata: Sequence[Sequence[int] | None] | None = None,
        correction_policy: str = "none",
        backend_tag: str = "",
    ) -> RolloutRecord:
        if correction_policy not in CORRECTION_POLICIES:
            raise ValueError(f"unknown correction policy {correction_policy!r}")
        if self.store.last_visible("revision", revision_id) is None:
            raise UnknownRevision(revision_id)
        routes = list(route_metadata) if route_metadata is not None else []
        masked: list[int] = []
        if correction_policy == "mask_unmapped":
            for i in range(token_count):
                if i >= len(routes) or routes[i] is None:
                    masked.append(i)
        record_id = f"rollout/{uuid.uuid4().hex}"
        self._meta_commit(
            "rollout_record",
            record_id,
            {
                "policy_id": policy_id,
                "revision_id": revision_id,
                "token_count": token_count,
                "route_metadata": [list(r) if r is not None else None for r in routes],
                "correction_policy": correction_policy,
                "masked_tokens": masked,
                "backend_tag": backend_tag,
            },
        )
        return RolloutRecord(
            record_id, policy_id, revision_id, token_count, correction_policy, tuple(masked), backend_tag
        )

    # -- readiness -----------------------------------------------------------

    def readiness_state(self, actor_id: str, revision_id: str) -> str:
        entry = self._readiness.get((actor_id, revision_id))
        return entry.state if entry else "absent"

    def grant_activation_proof(self, actor_id: str, revision_id: str) -> str:
        """Issued by the serving actor when a prewarm activation completes."""
        proof = uuid.uuid4().hex
        self._proofs[(actor_id, revision_id)] = proof
        return proof

    def transition_readiness(
        self, actor_id: str, revision_id: str, to_state: str, proof: str | None = None
    ) -> ReadinessEntry:
        if to_state not in READINESS_STATES:
            raise IllegalTransition(f"unknown state {to_state!r}")
        current = self.readiness_state(actor_id, revision_id)
        if (current, to_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{current} -> {to_state}")
        if to_state == "ready":
            expected = self._proofs.get((actor_id, revision_id))
            if expected is None or proof != expected:
                raise MissingActivationProof(f"{actor_id}/{revision_id}")
        entry_meta = {"actor": actor_id, "revision": revision_id, "state": to_state}
        committed = self._meta_commit("readiness", f"{actor_id}:{revision_id}", entry_meta)
        entry = ReadinessEntry(actor_id, revision_id, to_state, committed.timestamp_ms)
        self._readiness[(actor_id, revision_id)] = entry
        return entry
