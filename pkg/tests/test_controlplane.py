import json
import urllib.request

import pytest

from lorafleet.controlplane import (
    ControlPlane,
    SchemaInvalid,
    UnknownOp,
)
from lorafleet.httpapi import make_server


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


@pytest.fixture
def plane(tmp_path):
    return ControlPlane(tmp_path / "root", clock=FakeClock())


def create_policy(plane, base="base-a", rank=4):
    op = plane.submit("create_policy", {"base_id": base, "rank": rank, "target_modules": ["q", "k"]})
    plane.tick()
    return plane.poll(op)["result"]["policy_id"]


def add_trainer(plane, worker_id="t1", base="base-a", max_rank=16):
    plane.register_worker(worker_id, "trainer", base, max_rank, {"q", "k", "v"})


def add_sampler(plane, worker_id="s1", base="base-a", max_rank=16):
    plane.register_worker(worker_id, "sampler", base, max_rank, {"q", "k", "v"})


def test_submit_returns_id_before_execution(plane):
    op = plane.submit("create_policy", {"base_id": "b", "rank": 1, "target_modules": ["q"]})
    assert plane.poll(op)["status"] == "queued"
    plane.tick()
    assert plane.poll(op)["status"] == "committed"


def test_submit_schema_invalid(plane):
    with pytest.raises(SchemaInvalid):
        plane.submit("create_policy", {"base_id": "b"})
    with pytest.raises(SchemaInvalid):
        plane.submit("nonsense", {})
    with pytest.raises(SchemaInvalid):
        plane.submit("create_policy", {"base_id": "b", "rank": 0, "target_modules": ["q"]})
    assert plane.metrics()["submitted"] == 0


def test_submit_fifo_order(plane):
    ids = [
        plane.submit("create_policy", {"base_id": "b", "rank": 1, "target_modules": ["q"]})
        for _ in range(100)
    ]
    assert len(set(ids)) == 100
    order = [plane.ops[i].submit_index for i in ids]
    assert order == sorted(order)


def test_poll_unknown(plane):
    with pytest.raises(UnknownOp):
        plane.poll("op/none")


def test_train_step_requires_worker_and_runs(plane):
    policy = create_policy(plane)
    op = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    assert plane.poll(op)["status"] == "queued"  # no trainer yet: stays queued
    add_trainer(plane)
    plane.tick()
    result = plane.poll(op)
    assert result["status"] == "committed"
    assert result["result"]["scheduler_position"] == 1


def test_admission_shape_bounds(plane):
    policy = create_policy(plane, rank=32)
    add_trainer(plane, max_rank=16)
    op = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    result = plane.poll(op)
    assert result["status"] == "rejected"
    assert result["error"] == "NoCompatibleWorkerClass"


def test_admission_wrong_base_stays_queued(plane):
    policy = create_policy(plane, base="base-a")
    add_trainer(plane, base="base-b")
    op = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    assert plane.poll(op)["status"] == "queued"
    add_trainer(plane, worker_id="t2", base="base-a")
    plane.tick()
    assert plane.poll(op)["status"] == "committed"


def test_busy_worker_serializes_ops(plane):
    policy = create_policy(plane)
    add_trainer(plane)
    a = plane.submit("train_step", {"policy_id": policy})
    b = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    # synchronous desk-scale execution: both complete, in submit order
    ra, rb = plane.poll(a), plane.poll(b)
    assert ra["status"] == rb["status"] == "committed"
    assert ra["result"]["scheduler_position"] < rb["result"]["scheduler_position"]


def test_export_then_sample_attributes_revision(plane):
    policy = create_policy(plane)
    add_trainer(plane)
    add_sampler(plane)
    plane.submit("train_step", {"policy_id": policy})
    export = plane.submit("export", {"policy_id": policy})
    plane.tick()
    revision_id = plane.poll(export)["result"]["revision_id"]
    sample = plane.submit("sample", {"policy_id": policy})
    plane.tick()
    result = plane.poll(sample)["result"]
    assert result["revision_id"] == revision_id
    assert result["path"] in ("cold_load", "cpu_promote", "gpu_hit")
    assert result["e2e_ms"] is not None


def test_sample_incompatible_revision_fails(plane):
    policy = create_policy(plane, rank=8)
    add_trainer(plane)
    plane.submit("train_step", {"policy_id": policy})
    export = plane.submit("export", {"policy_id": policy})
    plane.tick()
    add_sampler(plane, max_rank=4)
    sample = plane.submit("sample", {"policy_id": policy})
    plane.tick()
    result = plane.poll(sample)
    # admission already knows no registered sampler class can take rank 8
    assert result["status"] == "rejected"
    assert result["error"] == "NoCompatibleWorkerClass"


def test_register_adapters_marks_registered(plane):
    policy = create_policy(plane)
    add_trainer(plane)
    add_sampler(plane)
    export = plane.submit("export", {"policy_id": policy})
    plane.tick()
    revision_id = plane.poll(export)["result"]["revision_id"]
    op = plane.submit("register_adapters", {"revision_ids": [revision_id], "actor_id": "s1"})
    plane.tick()
    assert plane.poll(op)["status"] == "committed"
    assert plane.lifecycle.readiness_state("s1", revision_id) == "registered"


def test_idempotency_key_dedupes(plane):
    a = plane.submit("create_policy", {"base_id": "b", "rank": 1, "target_modules": ["q"]},
                     idempotency_key="client-1")
    b = plane.submit("create_policy", {"base_id": "b", "rank": 1, "target_modules": ["q"]},
                     idempotency_key="client-1")
    assert a == b
    plane.tick()
    assert plane.metrics()["committed"] == 1


def test_restart_preserves_committed_results(tmp_path):
    clock = FakeClock()
    plane = ControlPlane(tmp_path / "root", clock=clock)
    policy = create_policy(plane)
    add_trainer(plane)
    op = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    before = plane.poll(op)
    assert before["status"] == "committed"

    reopened = ControlPlane(tmp_path / "root", clock=clock)
    after = reopened.poll(op)
    assert after["status"] == "committed"
    assert after["result"] == before["result"]


def test_restart_requeues_unfinished(tmp_path):
    clock = FakeClock()
    plane = ControlPlane(tmp_path / "root", clock=clock)
    policy = create_policy(plane)
    op = plane.submit("train_step", {"policy_id": policy})  # no trainer: stays queued
    plane.tick()
    reopened = ControlPlane(tmp_path / "root", clock=clock)
    assert reopened.poll(op)["status"] == "queued"


def test_evict_idle_trainer_keeps_durable_state(plane):
    policy = create_policy(plane)
    add_trainer(plane)
    plane.submit("train_step", {"policy_id": policy})
    export = plane.submit("export", {"policy_id": policy})
    plane.tick()
    revision_id = plane.poll(export)["result"]["revision_id"]

    plane.clock.advance(1000)
    evicted = plane.evict_idle(threshold_s=500)
    assert evicted == ["t1"]
    record = plane.lifecycle.get_policy(policy)
    assert revision_id in record.revision_ids  # revisions outlive the worker

    nxt = plane.submit("train_step", {"policy_id": policy})
    plane.tick()
    assert plane.poll(nxt)["status"] == "queued"  # waits for a future trainer
    add_trainer(plane, worker_id="t2")
    plane.tick()
    assert plane.poll(nxt)["status"] == "committed"


def test_evict_below_threshold_noop(plane):
    add_trainer(plane)
    plane.clock.advance(100)
    assert plane.evict_idle(threshold_s=500) == []
    assert "t1" in plane.workers


def test_evicted_sampler_cold_path_on_new_sampler(plane):
    policy = create_policy(plane)
    add_trainer(plane)
    add_sampler(plane)
    plane.submit("export", {"policy_id": policy})
    plane.tick()
    first = plane.submit("sample", {"policy_id": policy})
    plane.tick()
    assert plane.poll(first)["result"]["path"] == "cold_load"
    again = plane.submit("sample", {"policy_id": policy})
    plane.tick()
    assert plane.poll(again)["result"]["path"] in ("cpu_promote", "gpu_hit")

    plane.clock.advance(1000)
    assert "s1" in plane.evict_idle(threshold_s=500)
    add_sampler(plane, worker_id="s2")
    cold_again = plane.submit("sample", {"policy_id": policy})
    plane.tick()
    assert plane.poll(cold_again)["result"]["path"] == "cold_load"


def test_admission_soundness_random_property(tmp_path):
    """No op ever executes on a worker violating base or shape limits."""
    import random

    rng = random.Random(77)
    plane = ControlPlane(tmp_path / "root", clock=FakeClock())
    bases = ["base-a", "base-b"]
    policies = []
    for _ in range(6):
        base = rng.choice(bases)
        rank = rng.choice([1, 4, 8, 32])
        op = plane.submit("create_policy", {"base_id": base, "rank": rank,
                                            "target_modules": ["q", "k"]})
        plane.tick()
        policies.append((plane.poll(op)["result"]["policy_id"], base, rank))
    for i in range(5):
        plane.register_worker(f"t{i}", "trainer", rng.choice(bases),
                              rng.choice([4, 8, 16]), {"q", "k", "v"})
    ops = []
    for i in range(40):
        policy_id, _base, _rank = rng.choice(policies)
        ops.append(plane.submit("train_step", {"policy_id": policy_id}))
    for _ in range(4):
        plane.tick()
    for op_id in ops:
        op = plane.ops[op_id]
        if op.status in ("committed", "failed") and op.assigned_worker:
            record = plane.lifecycle.get_policy(op.payload["policy_id"])
            worker = plane.workers[op.assigned_worker]
            assert worker.base_id == record.base_id
            assert record.adapter_shape.rank <= worker.max_rank
            assert record.adapter_shape.target_modules <= worker.supported_modules
        elif op.status == "rejected":
            assert op.error == "NoCompatibleWorkerClass"


def test_metrics_counters(plane):
    create_policy(plane)
    m = plane.metrics()
    assert m["submitted"] == 1
    assert m["committed"] == 1
    assert m["queue_depth"] == 0
    assert m["workers"] == 0


def _http(server, method, path, body=None):
    port = server.server_address[1]
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}", data=data, method=method,
        headers={"Content-Type": "application/json"},
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read().decode())


def test_http_api_round_trip(tmp_path):
    import threading

    plane = ControlPlane(tmp_path / "root")
    server = make_server(plane)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        status, reg = _http(server, "POST", "/v1/workers",
                            {"worker_id": "t1", "role": "trainer", "base_id": "b",
                             "max_rank": 16, "supported_modules": ["q"]})
        assert status == 200 and reg["worker_id"] == "t1"

        status, doc = _http(server, "POST", "/v1/ops",
                            {"kind": "create_policy",
                             "payload": {"base_id": "b", "rank": 1, "target_modules": ["q"]}})
        assert status == 200
        op_id = doc["op_id"]

        status, polled = _http(server, "GET", f"/v1/ops/{op_id}")
        assert status == 200 and polled["status"] == "committed"
        policy_id = polled["result"]["policy_id"]

        status, record = _http(server, "GET", f"/v1/policies/{policy_id}")
        assert status == 200 and record["base_id"] == "b"

        status, metrics = _http(server, "GET", "/v1/metrics")
        assert status == 200 and metrics["workers"] == 1

        status, err = _http(server, "POST", "/v1/ops", {"kind": "bogus", "payload": {}})
        assert status == 400 and err["code"] == "SchemaInvalid"

        status, err = _http(server, "GET", "/v1/ops/op/none")
        assert status == 404 and err["code"] == "UnknownOp"

        status, _ = _http(server, "DELETE", "/v1/workers/t1")
        assert status == 200
        status, metrics = _http(server, "GET", "/v1/metrics")
        assert metrics["workers"] == 0
    finally:
        server.shutdown()
