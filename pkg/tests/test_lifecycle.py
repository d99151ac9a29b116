import threading

import pytest

from lorafleet import packfmt
from lorafleet.lifecycle import (
    ActorDescriptor,
    IllegalTransition,
    InvalidShape,
    Lifecycle,
    MissingActivationProof,
    NoSession,
    SessionHeld,
    UnknownRevision,
)
from lorafleet.metastore import MetaStore, recover


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


@pytest.fixture
def life(tmp_path):
    store = MetaStore(tmp_path / "store")
    return Lifecycle(store)


def small_adapter(seed=3):
    manifest = packfmt.synthetic_manifest(layers=1, experts=2, projections=1, other=2)
    return manifest, packfmt.synthetic_payloads(manifest, seed)


def export(life, session, step=1, seed=3):
    manifest, payloads = small_adapter(seed)
    return life.export_revision(session, step, manifest, payloads)


def test_create_policy_empty_revisions(life):
    record = life.create_policy("qwen3-30b", rank=1, target_modules={"expert_proj"})
    assert record.revision_ids == []
    assert record.session_holder is None
    assert record.base_id == "qwen3-30b"


def test_create_policy_invalid_shape(life):
    with pytest.raises(InvalidShape):
        life.create_policy("qwen3-30b", rank=0, target_modules={"expert_proj"})
    with pytest.raises(InvalidShape):
        life.create_policy("qwen3-30b", rank=4, target_modules=set())


def test_create_policy_isolation(life):
    a = life.create_policy("b", 1, {"m"})
    b = life.create_policy("b", 2, {"m"})
    assert a.policy_id != b.policy_id
    assert life.get_policy(a.policy_id).adapter_shape.rank == 1
    assert life.get_policy(b.policy_id).adapter_shape.rank == 2


def test_session_lock_cycle(life):
    record = life.create_policy("b", 1, {"m"})
    token = life.acquire_session(record.policy_id, "w1")
    with pytest.raises(SessionHeld) as err:
        life.acquire_session(record.policy_id, "w2")
    assert err.value.holder == "w1"
    life.release_session(token)
    token2 = life.acquire_session(record.policy_id, "w2")
    assert token2.worker_id == "w2"


def test_session_lease_expiry(tmp_path):
    clock = FakeClock()
    store = MetaStore(tmp_path / "store", clock=clock)
    life = Lifecycle(store, clock=clock)
    record = life.create_policy("b", 1, {"m"})
    life.acquire_session(record.policy_id, "w1", lease_s=60)
    clock.advance(61)
    token = life.acquire_session(record.policy_id, "w2")
    assert token.worker_id == "w2"


def test_session_storm_single_holder(life):
    record = life.create_policy("b", 1, {"m"})
    wins, errors = [], []

    def worker(i):
        try:
            wins.append(life.acquire_session(record.policy_id, f"w{i}"))
        except SessionHeld:
            errors.append(i)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1
    assert len(errors) == 15


def test_export_revision_appends_in_order(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    r1 = export(life, session, step=120, seed=1)
    r2 = export(life, session, step=240, seed=2)
    assert r1.step == 120 and r2.step == 240
    listed = life.get_policy(record.policy_id).revision_ids
    assert listed == [r1.revision_id, r2.revision_id]
    assert r1.revision_id.startswith("rev/")


def test_export_requires_session(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    life.release_session(session)
    with pytest.raises(NoSession):
        export(life, session)


def test_revision_immutable_digest(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    assert life.verify_revision(rev.revision_id)


def test_export_crash_then_retry_single_revision(tmp_path):
    store = MetaStore(tmp_path / "store")
    life = Lifecycle(store)
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")

    class Crash(RuntimeError):
        pass

    def hook(site):
        if site == "mid_write":
            raise Crash(site)

    store._crash_hook = hook
    with pytest.raises(Crash):
        export(life, session)
    store._crash_hook = None

    reopened, _ = recover(tmp_path / "store")
    life2 = Lifecycle(reopened)
    assert life2.get_policy(record.policy_id).revision_ids == []
    # the worker still holds its lease across the service restart
    export(life2, session)
    assert len(life2.get_policy(record.policy_id).revision_ids) == 1


def test_compatibility_matrix(life):
    record = life.create_policy("base-A", 8, {"q", "k"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)

    ok = life.check_compatibility(rev, ActorDescriptor("base-A", 16, frozenset({"q", "k", "v"})))
    assert ok.ok and ok.reason is None

    base = life.check_compatibility(rev, ActorDescriptor("base-B", 16, frozenset({"q", "k"})))
    assert not base.ok and base.reason == "base_mismatch"

    rank = life.check_compatibility(rev, ActorDescriptor("base-A", 4, frozenset({"q", "k"})))
    assert not rank.ok and rank.reason == "rank_exceeds_limit"

    mods = life.check_compatibility(rev, ActorDescriptor("base-A", 16, frozenset({"q"})))
    assert not mods.ok and mods.reason == "unsupported_modules"

    fmt = life.check_compatibility(
        rev, ActorDescriptor("base-A", 16, frozenset({"q", "k"}), frozenset({99}))
    )
    assert not fmt.ok and fmt.reason == "format_version_unsupported"


def test_rollout_record_mask_counting(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)

    full = life.record_rollout(
        record.policy_id, rev.revision_id, 10, [[1]] * 10, "mask_unmapped"
    )
    assert full.masked_tokens == ()

    partial = life.record_rollout(
        record.policy_id, rev.revision_id, 10, [[1]] * 7, "mask_unmapped"
    )
    assert len(partial.masked_tokens) == 3
    assert partial.masked_tokens == (7, 8, 9)

    unmasked = life.record_rollout(record.policy_id, rev.revision_id, 10, [[1]] * 7, "none")
    assert unmasked.masked_tokens == ()


def test_rollout_record_requires_committed_revision(life):
    record = life.create_policy("b", 1, {"m"})
    with pytest.raises(UnknownRevision):
        life.record_rollout(record.policy_id, "rev/none/1-deadbeef", 4)


def test_readiness_happy_path(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    life.transition_readiness("actor-1", rev.revision_id, "registered")
    life.transition_readiness("actor-1", rev.revision_id, "prewarming")
    proof = life.grant_activation_proof("actor-1", rev.revision_id)
    entry = life.transition_readiness("actor-1", rev.revision_id, "ready", proof=proof)
    assert entry.state == "ready"


def test_readiness_skipping_prewarm_illegal(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    life.transition_readiness("actor-1", rev.revision_id, "registered")
    with pytest.raises(IllegalTransition):
        life.transition_readiness("actor-1", rev.revision_id, "ready")


def test_readiness_no_backward_edges(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    life.transition_readiness("actor-1", rev.revision_id, "registered")
    life.transition_readiness("actor-1", rev.revision_id, "prewarming")
    proof = life.grant_activation_proof("actor-1", rev.revision_id)
    life.transition_readiness("actor-1", rev.revision_id, "ready", proof=proof)
    with pytest.raises(IllegalTransition):
        life.transition_readiness("actor-1", rev.revision_id, "registered")


def test_readiness_requires_proof(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    life.transition_readiness("actor-1", rev.revision_id, "registered")
    life.transition_readiness("actor-1", rev.revision_id, "prewarming")
    with pytest.raises(MissingActivationProof):
        life.transition_readiness("actor-1", rev.revision_id, "ready", proof="bogus")


def test_readiness_monotone_subsequence(life):
    record = life.create_policy("b", 1, {"m"})
    session = life.acquire_session(record.policy_id, "w1")
    rev = export(life, session)
    observed = ["absent"]
    life.transition_readiness("a", rev.revision_id, "registered")
    observed.append(life.readiness_state("a", rev.revision_id))
    life.transition_readiness("a", rev.revision_id, "retired")
    observed.append(life.readiness_state("a", rev.revision_id))
    order = {s: i for i, s in enumerate(["absent", "registered", "prewarming", "ready", "retired"])}
    assert all(order[a] < order[b] for a, b in zip(observed, observed[1:]))
