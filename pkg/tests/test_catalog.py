import pytest

from lorafleet.catalog import (
    AdapterTemplate,
    CatalogError,
    CatalogLayout,
    audit_catalog,
    build_catalog,
    stratified_sample,
)
from lorafleet.metastore import MetaStore


def small_layout(tmp_path, shards=5, per_shard=4):
    return CatalogLayout(tmp_path / "catalog", shards, per_shard)


def test_path_bijection(tmp_path):
    layout = small_layout(tmp_path, shards=7, per_shard=9)
    for s in range(7):
        for i in range(9):
            path = layout.path(s, i)
            assert layout.parse(path) == (s, i)
    with pytest.raises(CatalogError):
        layout.path(7, 0)
    with pytest.raises(CatalogError):
        layout.parse(layout.root / "shard-001" / "oops.bin")


def test_build_single_adapter(tmp_path):
    layout = small_layout(tmp_path, shards=1, per_shard=1)
    report = build_catalog(layout, parallelism=1)
    assert report.built_count == 1
    assert report.error_count == 0
    assert layout.path(0, 0).exists()


def test_build_counts_and_distinct_digests(tmp_path):
    layout = small_layout(tmp_path)
    report = build_catalog(layout, seed=3)
    assert report.built_count == 20
    assert report.error_count == 0
    raw = {layout.path(s, i).read_bytes() for s in range(5) for i in range(4)}
    assert len(raw) == 20  # seeded payloads differ per adapter


def test_build_registers_revisions(tmp_path):
    layout = small_layout(tmp_path, shards=2, per_shard=2)
    store = MetaStore(tmp_path / "store")
    build_catalog(layout, store=store)
    revisions = store.list_visible("revision")
    policies = store.list_visible("policy")
    assert len(revisions) == 4
    assert len(policies) == 4
    assert all(r.meta["catalog_path"] for r in revisions)


def test_build_unwritable_root_fails_fast(tmp_path):
    blocker = tmp_path / "not-a-dir"
    blocker.write_bytes(b"")
    layout = CatalogLayout(blocker / "catalog", 1, 1)
    with pytest.raises(CatalogError):
        build_catalog(layout)
    assert not (blocker / "catalog").exists()


def test_stratified_sample_covers_every_shard(tmp_path):
    layout = small_layout(tmp_path, shards=10, per_shard=8)
    picks = stratified_sample(layout, sample_count=25, seed=1)
    assert len(picks) == 25
    per_shard = {}
    for s, _i in picks:
        per_shard[s] = per_shard.get(s, 0) + 1
    assert set(per_shard) == set(range(10))
    assert all(c >= 2 for c in per_shard.values())  # floor(25/10)


def test_audit_all_ok(tmp_path):
    layout = small_layout(tmp_path, shards=4, per_shard=3)
    build_catalog(layout)
    report = audit_catalog(layout, sample_count=8, seed=5)
    assert report.sampled == 8
    assert report.ok == 8
    assert report.errors == []
    assert report.shards_covered == 4
    assert report.per_adapter_keys == 13  # L=2,E=4,P=2,O=5 template


def test_audit_sample_zero(tmp_path):
    layout = small_layout(tmp_path, shards=2, per_shard=2)
    build_catalog(layout)
    report = audit_catalog(layout, 0, seed=1)
    assert report.sampled == 0
    assert report.shards_covered == 0


def test_audit_reports_deleted_victim(tmp_path):
    layout = small_layout(tmp_path, shards=3, per_shard=2)
    build_catalog(layout)
    picks = stratified_sample(layout, sample_count=6, seed=9)
    victim = layout.path(*picks[2])
    victim.unlink()
    report = audit_catalog(layout, sample_count=6, seed=9)
    assert report.ok == 5
    assert len(report.errors) == 1
    assert str(victim) in report.errors[0]


def test_audit_never_mutates(tmp_path):
    layout = small_layout(tmp_path, shards=2, per_shard=2)
    build_catalog(layout)
    before = {
        (s, i): layout.path(s, i).read_bytes() for s in range(2) for i in range(2)
    }
    audit_catalog(layout, sample_count=4, seed=2)
    after = {
        (s, i): layout.path(s, i).read_bytes() for s in range(2) for i in range(2)
    }
    assert before == after


def test_build_deterministic_per_seed(tmp_path):
    a = CatalogLayout(tmp_path / "a", 2, 2)
    b = CatalogLayout(tmp_path / "b", 2, 2)
    build_catalog(a, seed=7)
    build_catalog(b, seed=7)
    for s in range(2):
        for i in range(2):
            assert a.path(s, i).read_bytes() == b.path(s, i).read_bytes()
