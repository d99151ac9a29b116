"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with `pytest tests/test_acceptance.py -s` to see the PASS/FAIL lines.
Every tolerance is pinned here; nothing defers to later calibration.
"""

import random
from contextlib import contextmanager

import pytest

from lorafleet import packfmt, trainersim
from lorafleet.catalog import AdapterTemplate, CatalogLayout, audit_catalog, build_catalog
from lorafleet.lifecycle import Lifecycle
from lorafleet.loadgen import TrafficSpec, fleet_size
from lorafleet.metastore import MetaStore, recover
from lorafleet.servesim import (
    ActorConfig,
    ColdLoadRejected,
    LatencyModel,
    Request,
    ServingActor,
    run_requests,
    run_scenario,
    synthetic_catalog,
)


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except Exception:
        print(f"[FAIL] criterion {number:02d}: {description}")
        raise
    print(f"[PASS] criterion {number:02d}: {description}")


def test_criterion_01_packing_fanout_exact(tmp_path):
    with criterion(1, "37,248-tensor manifest packs to 672 keys (288 groups + 384 copied)"):
        manifest = packfmt.synthetic_manifest(layers=48, experts=128, projections=3, other=384)
        assert len(manifest.tensors) == 37_248
        payloads = packfmt.synthetic_payloads(manifest, seed=1)
        index = packfmt.pack(manifest, payloads, tmp_path / "pool.mtpk")
        assert index.key_count == 672
        assert len(index.groups) == 288
        assert len(index.copied) == 384


def test_criterion_02_round_trip_losslessness(tmp_path):
    with criterion(2, "200 randomized manifests round-trip byte-exactly"):
        rng = random.Random(2024)
        for trial in range(200):
            layers = rng.randint(0, 8)
            experts = rng.randint(0, 8)
            projections = rng.randint(0, 8)
            other = rng.randint(0, 8)
            dtype = rng.choice(["f32", "bf16", "f16", "u8"])
            manifest = packfmt.synthetic_manifest(layers, experts, projections, other, dtype=dtype)
            payloads = packfmt.synthetic_payloads(manifest, seed=trial)
            out = tmp_path / "rt.mtpk"
            packfmt.pack(manifest, payloads, out)
            got_manifest, got_payloads = packfmt.unpack(out)
            assert got_payloads == payloads, trial
            assert {(t.name, t.dtype, t.shape) for t in got_manifest.tensors} == {
                (t.name, t.dtype, t.shape) for t in manifest.tensors
            }, trial


def test_criterion_03_catalog_build_audit_scaled(tmp_path):
    with criterion(3, "10,000-adapter catalog builds clean; 256-sample audit covers 100 shards"):
        layout = CatalogLayout(tmp_path / "catalog", 100, 100)
        store = MetaStore(tmp_path / "meta")
        build = build_catalog(layout, AdapterTemplate(), seed=9, parallelism=8, store=store)
        assert build.built_count == 10_000
        assert build.error_count == 0
        assert len(store.list_visible("revision")) == 10_000
        audit = audit_catalog(layout, sample_count=256, seed=7)
        assert audit.sampled == 256
        assert audit.ok == 256
        assert audit.errors == []
        assert audit.shards_covered == 100


CRASH_SITES = ("start", "after_verify", "after_move", "mid_write", "after_write", "after_flush")


def test_criterion_04_visibility_under_crash(tmp_path):
    with criterion(4, "every export crash point leaves zero or one visible revision"):
        class Crash(RuntimeError):
            pass

        manifest = packfmt.synthetic_manifest(1, 2, 1, other=2)
        payloads = packfmt.synthetic_payloads(manifest, 3)
        for site in CRASH_SITES:
            root = tmp_path / f"store-{site}"
            store = MetaStore(root)
            life = Lifecycle(store)
            record = life.create_policy("base", 1, {"m"})
            session = life.acquire_session(record.policy_id, "w1")

            def hook(at, site=site):
                if at == site:
                    raise Crash(at)

            store._crash_hook = hook
            with pytest.raises(Crash):
                life.export_revision(session, 1, manifest, payloads)
            store._crash_hook = None

            reopened, _orphans = recover(root)
            life2 = Lifecycle(reopened)
            visible = life2.get_policy(record.policy_id).revision_ids
            assert len(visible) in (0, 1), site
            for revision_id in visible:
                # a visible revision is complete: digest re-verifies
                assert life2.verify_revision(revision_id), site
            if not visible:
                life2.export_revision(session, 1, manifest, payloads)
                assert len(life2.get_policy(record.policy_id).revision_ids) == 1, site


def paper_latency():
    return LatencyModel(fetch_ms=400, build_ms=700, register_ms=160, activate_ms=100,
                        prefill_ms=500, decode_ms_per_token=10, promote_ms=50)


def test_criterion_05_cold_staircase():
    with criterion(5, "16-deep cold staircase lands on j x 1.36 s, 16th at 21.76 s"):
        spec = TrafficSpec(kind="staircase", distinct=16)
        cfg = ActorConfig(max_inflight=1, queue_depth=16, latency=paper_latency())
        result = run_scenario(cfg, spec)
        loads = sorted(t.load_ms for t in result.traces)
        assert len(loads) == 16
        for j, load in enumerate(loads, start=1):
            assert abs(load - j * 1360) <= 1, (j, load)
        assert loads[-1] == 21_760
        assert 1375 <= loads[-1] <= 23_267


def test_criterion_06_single_flight_and_backpressure():
    with criterion(6, "8 same-revision misses share 1 load; M=1,Q=1 burst loads 2, rejects 2"):
        actor = ServingActor(
            ActorConfig(max_inflight=1, queue_depth=8, latency=paper_latency()),
            catalog=synthetic_catalog(["a"]),
        )
        run_requests(actor, [Request(f"r{i}", "a", 0) for i in range(8)])
        assert len([j for j in actor.job_log if j.revision_id == "rev/a"]) == 1
        assert actor.stats()["completed"] == 8

        names = [f"p{i}" for i in range(4)]
        burst = ServingActor(
            ActorConfig(max_inflight=1, queue_depth=1, latency=paper_latency()),
            catalog=synthetic_catalog(names),
        )
        run_requests(burst, [Request(f"b{i}", n, 0) for i, n in enumerate(names)])
        assert len([j for j in burst.job_log if j.state == "done"]) == 2
        assert sum(1 for t in burst.traces if t.path == "rejected") == 2


def test_criterion_07_batch_window():
    with criterion(7, "128 distinct ready adapters never exceed 64 per batch; all complete"):
        names = [f"p{i}" for i in range(128)]
        actor = ServingActor(
            ActorConfig(gpu_window=64, max_running=256, cpu_capacity_entries=256,
                        latency=paper_latency()),
            catalog=synthetic_catalog(names),
        )
        actor.preload(names)
        run_requests(actor, [Request(f"r{i}", n, 0) for i, n in enumerate(names)])
        assert max(len(s) for _t, s in actor.batch_log) == 64
        assert actor.stats()["completed"] == 128


def reload_spec(mode):
    return TrafficSpec(kind="hot_reload", rollout_mode=mode, warm_count=32, new_count=16,
                       warm_rps=0.5, reload_at_ms=10_000, tail_ms=40_000)


def reload_config():
    return ActorConfig(max_inflight=16, queue_depth=32, max_running=8, latency=paper_latency())


def test_criterion_08_two_phase_readiness():
    with criterion(8, "hot reload: immediate stalls warm; admitted protects; two-phase load p95 = 0"):
        immediate = run_scenario(reload_config(), reload_spec("immediate"))
        warm = immediate.stats["warm_metrics"]
        new = immediate.stats["new_metrics"]
        assert warm["stalls_over_threshold"] >= 1
        assert any(t.group == "new" and t.load_ms > 0 for t in immediate.traces)

        admitted = run_scenario(reload_config(), reload_spec("admitted"))
        warm = admitted.stats["warm_metrics"]
        new = admitted.stats["new_metrics"]
        assert warm["stalls_over_threshold"] == 0
        assert new["load_p95"] > 0

        two_phase = run_scenario(reload_config(), reload_spec("two_phase"))
        warm = two_phase.stats["warm_metrics"]
        new = two_phase.stats["new_metrics"]
        assert warm["stalls_over_threshold"] == 0
        assert new["load_p95"] == 0
        assert new["completed"] == 16
        assert two_phase.stats["prewarm_span_ms"] > 0
        assert all(t.path != "cold_load" for t in two_phase.traces)


def test_criterion_09_open_loop_knee():
    with criterion(9, "Poisson sweep: 100% attainment at 0.25u and 0.5u, <100% at 1.5u"):
        lat = LatencyModel(prefill_ms=250, decode_ms_per_token=4, promote_ms=0)
        max_running = 2
        mu = max_running / ((lat.prefill_ms + 64 * lat.decode_ms_per_token) / 1000)
        cfg = ActorConfig(max_running=max_running, latency=lat, cpu_capacity_entries=256)
        names = [f"p{i}" for i in range(32)]

        def sweep(lam):
            spec = TrafficSpec(kind="poisson", rate_rps=lam, duration_s=180, seed=42,
                               names=names)
            return run_scenario(cfg, spec).stats["metrics"]

        low, mid, over = sweep(0.25 * mu), sweep(0.5 * mu), sweep(1.5 * mu)
        assert low["slo_attainment"] == 1.0
        assert mid["slo_attainment"] == 1.0
        assert over["slo_attainment"] < 1.0
        assert abs(low["achieved_rps"] - 0.25 * mu) / (0.25 * mu) < 0.10
        assert abs(mid["achieved_rps"] - 0.5 * mu) / (0.5 * mu) < 0.10


def test_criterion_10_trainer_state_swap_and_schedule():
    with criterion(10, "1,000 switches preserve digests; masks stay zero; 4B speedup in [1.5, 2.0]"):
        worker = trainersim.TrainerWorker("t1", "base", max_rank=16,
                                          module_order=("q", "k", "v", "o"))
        rng = random.Random(1001)
        policies = [f"P{i}" for i in range(5)]
        shadow: dict[str, dict] = {}
        active = None
        for i in range(1000):
            target = rng.choice(policies)
            shape = trainersim.PolicyShape(target, 1 + rng.randrange(8),
                                           frozenset(rng.sample(("q", "k", "v", "o"), 2)))
            report = worker.switch_policy(f"tok{i}", shape)
            if active is not None:
                shadow[active] = report.saved_digests
            if target in shadow:
                assert report.restored_digests == shadow[target], i
            active = target
            if rng.random() < 0.5:
                worker.run_update(f"tok{i}")
            assert worker.inactive_region_zero(), i
            shadow[active] = worker.state.digests()

        plans = trainersim.default_4b_plan()
        seq = trainersim.simulate_schedule(plans, "sequential")
        conc = trainersim.simulate_schedule(plans, "concurrent")
        speedup = seq.wall_time_ms / conc.wall_time_ms
        assert 1.5 <= speedup <= 2.0, speedup
        assert seq.peak_resident_bytes == conc.peak_resident_bytes


def test_criterion_11_sharded_export_equivalence():
    with criterion(11, "TP x EP in {1,2,4}^2 reassembles byte-identically with dedup"):
        base = packfmt.synthetic_manifest(layers=2, experts=4, projections=2, other=0)
        extra = [
            packfmt.TensorSpec("model.layers.0.self_attn.q.lora_A.weight", "f32", (16,)),
            packfmt.TensorSpec("model.layers.0.mlp.shared_expert.gate.lora_A.weight", "f32", (4,)),
            packfmt.TensorSpec("model.layers.0.norm.scale", "f32", (2,)),
        ]
        manifest = packfmt.AdapterManifest(base.tensors + extra)
        for seed in range(5):
            payloads = packfmt.synthetic_payloads(manifest, seed)
            for tp in (1, 2, 4):
                for ep in (1, 2, 4):
                    view = trainersim.shard_adapter(manifest, payloads, tp=tp, ep=ep)
                    shared = "model.layers.0.mlp.shared_expert.gate.lora_A.weight"
                    copies = sum(1 for frags in view.shared_expert_copies.values() if shared in frags)
                    assert copies == ep
                    out = trainersim.export_from_shards(view)
                    assert out == payloads, (seed, tp, ep)
                    assert sum(1 for k in out if k == shared) == 1


def test_criterion_12_fleet_arithmetic():
    with criterion(12, "fleet rows reproduce 36/144, 55/220, 72/288 exactly"):
        plan = fleet_size(2300, batch_window=64, gpus_per_engine=4)
        placement = plan.row("warm_placement")
        assert (placement.engines, placement.gpus) == (36, 144)
        cold_rate = plan.row("cold_load_rate")
        assert (cold_rate.engines, cold_rate.gpus) == (55, 220)
        burst = plan.row("cold_burst_isolation")
        assert (burst.engines, burst.gpus) == (72, 288)
