"""Build, shard, and audit packed-adapter catalogs on disk.

Mirrors the million-adapter build/audit protocol at desk scale: shard
directories of packed files, per-adapter seeded payloads so digests
differ, stratified sampling so an audit touches every shard.
"""

from __future__ import annotations

import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

from . import packfmt
from .lifecycle import Lifecycle
from .metastore import MetaStore

_ADAPTER_PATH = re.compile(r"^shard-(\d{3})/adapter-(\d{6})\.mtpk$")


class CatalogError(Exception):
    pass


@dataclass(frozen=True)
class CatalogLayout:
    root: Path
    shard_count: int
    adapters_per_shard: int

    @property
    def total(self) -> int:
        return self.shard_count * self.adapters_per_shard

    def path(self, shard: int, index: int) -> Path:
        if not (0 <= shard < self.shard_count and 0 <= index < self.adapters_per_shard):
            raise CatalogError(f"(shard={shard}, index={index}) outside layout")
        return Path(self.root) / f"shard-{shard:03d}" / f"adapter-{index:06d}.mtpk"

    def parse(self, path: Path) -> tuple[int, int]:
        rel = Path(path).relative_to(self.root).as_posix()
        m = _ADAPTER_PATH.match(rel)
        if m is None:
            raise CatalogError(f"{rel} does not follow the shard naming rule")
        return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class AdapterTemplate:
    layers: int = 2
    experts: int = 4
    projections: int = 2
    other: int = 5
    dtype: str = "f32"
    base_id: str = "base"
    rank: int = 1

    @staticmethod
    def from_json(doc: dict) -> "AdapterTemplate":
        return AdapterTemplate(**doc)


@dataclass
class BuildReport:
    built_count: int
    error_count: int
    errors: list[str]
    wall_time_s: float
    bytes_written: int
    write_throughput_mb_s: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CatalogAuditReport:
    sampled: int
    ok: int
    errors: list[str]
    shards_covered: int
    wall_time_s: float
    per_adapter_keys: int | None = None

    def to_json(self) -> dict:
        return asdict(self)


def build_catalog(
    layout: CatalogLayout,
    template: AdapterTemplate = AdapterTemplate(),
    seed: int = 0,
    parallelism: int = 4,
    store: MetaStore | None = None,
) -> BuildReport:
    """Write shard_count x adapters_per_shard packed adapters.

    Each shard builds sequentially inside a worker pool over shards.
    Per-adapter failures are counted and the build continues. When a
    metastore is supplied, every adapter is registered as a committed
    revision under its own generated policy.
    """
    root = Path(layout.root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".writable"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CatalogError(f"catalog root not writable: {exc}") from exc

    manifest = packfmt.synthetic_manifest(
        template.layers, template.experts, template.projections, template.other,
        dtype=template.dtype,
    )
    start = time.monotonic()
    results: list[tuple[int, int, str | None, int]] = []

    def build_shard(shard: int):
        out = []
        shard_dir = root / f"shard-{shard:03d}"
        shard_dir.mkdir(exist_ok=True)
        for index in range(layout.adapters_per_shard):
            path = layout.path(shard, index)
            try:
                adapter_seed = seed * 1_000_003 + shard * 10_007 + index
                payloads = packfmt.synthetic_payloads(manifest, adapter_seed)
                packfmt.pack(manifest, payloads, path)
                out.append((shard, index, None, path.stat().st_size))
            except Exception as exc:  # count, keep building
                out.append((shard, index, f"shard {shard} adapter {index}: {exc}", 0))
        return out

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for chunk in pool.map(build_shard, range(layout.shard_count)):
                results.extend(chunk)
    else:
        for shard in range(layout.shard_count):
            results.extend(build_shard(shard))

    if store is not None:
        from .metastore import compute_digest

        life = Lifecycle(store)
        for shard, index, error, _size in results:
            if error is not None:
                continue
            record = life.create_policy(template.base_id, template.rank, {"expert_proj"})
            path = layout.path(shard, index)
            digest = compute_digest([path], None)
            attempt = store.begin_attempt("catalog-build", "revision")
            # the packed file already lives under the catalog root; the
            # revision entry names it in place instead of re-staging bytes
            store.commit(
                "catalog-build", attempt, "revision",
                f"rev/{record.policy_id.split('/', 1)[1]}/0-{digest[:8]}",
                meta={
                    "policy_id": record.policy_id,
                    "base_id": template.base_id,
                    "step": 0,
                    "shape": {"rank": template.rank, "target_modules": ["expert_proj"]},
                    "manifest_digest": digest,
                    "catalog_path": str(path),
                },
            )
            if attempt.directory.exists() and not any(attempt.directory.iterdir()):
                attempt.directory.rmdir()

    errors = [e for _s, _i, e, _b in results if e is not None]
    wall = time.monotonic() - start
    total_bytes = sum(b for _s, _i, e, b in results if e is None)
    return BuildReport(
        built_count=len(results) - len(errors),
        error_count=len(errors),
        errors=errors,
        wall_time_s=wall,
        bytes_written=total_bytes,
        write_throughput_mb_s=(total_bytes / 1e6 / wall) if wall > 0 else 0.0,
    )


def discover_layout(root) -> CatalogLayout:
    """Infer (shard_count, adapters_per_shard) from an existing catalog tree."""
    root = Path(root)
    shards = sorted(p for p in root.glob("shard-*") if p.is_dir())
    if not shards:
        raise CatalogError(f"{root}: no shard directories")
    per_shard = len(list(shards[0].glob("adapter-*.mtpk")))
    if per_shard == 0:
        raise CatalogError(f"{shards[0]}: no adapters")
    return CatalogLayout(root, len(shards), per_shard)


def stratified_sample(layout: CatalogLayout, sample_count: int, seed: int) -> list[tuple[int, int]]:
    """Sample (shard, index) pairs so every shard gets floor(n/S) picks
    and the remainder lands on seeded distinct shards."""
    rng = random.Random(seed)
    base, extra = divmod(sample_count, layout.shard_count)
    picks: list[tuple[int, int]] = []
    extra_shards = set(rng.sample(range(layout.shard_count), extra)) if extra else set()
    for shard in range(layout.shard_count):
        quota = base + (1 if shard in extra_shards else 0)
        quota = min(quota, layout.adapters_per_shard)
        indices = rng.sample(range(layout.adapters_per_shard), quota)
        picks.extend((shard, i) for i in sorted(indices))
    return picks


def audit_catalog(
    layout: CatalogLayout,
    sample_count: int,
    seed: int,
    keys_per_adapter: int = 16,
) -> CatalogAuditReport:
    """Checksum-audit a stratified sample; per-sample failures are listed."""
    start = time.monotonic()
    if sample_count <= 0:
        return CatalogAuditReport(0, 0, [], 0, time.monotonic() - start)
    picks = stratified_sample(layout, sample_count, seed)
    ok = 0
    errors: list[str] = []
    shards = set()
    keys = None
    for shard, index in picks:
        path = layout.path(shard, index)
        try:
            report = packfmt.audit(path, sample_count=keys_per_adapter, seed=seed ^ (shard << 12) ^ index)
            if report.errors:
                errors.append(f"{path}: {report.errors}")
            else:
                ok += 1
                keys = report.keys
            shards.add(shard)
        except (OSError, packfmt.PackedFormatError) as exc:
            errors.append(f"{path}: {exc}")
            shards.add(shard)
    return CatalogAuditReport(
        sampled=len(picks),
        ok=ok,
        errors=errors,
        shards_covered=len(shards),
        wall_time_s=time.monotonic() - start,
        per_adapter_keys=keys,
    )
