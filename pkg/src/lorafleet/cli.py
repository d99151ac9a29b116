"""Single entrypoint: pack/unpack/audit, catalog, serve, trainsim, probes, fleet.

Exit codes: 0 success, 1 domain error (machine-readable JSON on stderr),
2 usage error. `LORAFLEET_ROOT` supplies the default data root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.parse
import zlib
from pathlib import Path

from . import catalog as catalogmod
from . import loadgen, packfmt, report, trainersim
from .lifecycle import LifecycleError
from .metastore import MetaStore, MetaStoreError
from .servesim import ActorConfig, ScenarioError, run_scenario

DOMAIN_ERRORS = (
    packfmt.PackedFormatError,
    MetaStoreError,
    LifecycleError,
    catalogmod.CatalogError,
    loadgen.SpecError,
    ScenarioError,
    trainersim.TrainerError,
    OSError,
    KeyError,
    ValueError,
)


def _data_root(value: str | None) -> Path:
    return Path(value or os.environ.get("LORAFLEET_ROOT") or ".")


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _fail(exc: Exception) -> int:
    doc = {"code": type(exc).__name__, "message": str(exc)}
    print(json.dumps(doc), file=sys.stderr)
    return 1


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _parse_synthetic(text: str):
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValueError("--synthetic wants L,E,P,O")
    return parts


def _safe_name(name: str) -> str:
    return urllib.parse.quote(name, safe="")


def _manifest_from_dir(src: Path):
    doc = _load_json(src / "manifest.json")
    tensors = [
        packfmt.TensorSpec(t["name"], t["dtype"], tuple(t["shape"])) for t in doc["tensors"]
    ]
    payloads = {
        t.name: (src / "payloads" / f"{_safe_name(t.name)}.bin").read_bytes()
        for t in tensors
    }
    return packfmt.AdapterManifest(tensors), payloads


def cmd_pack(args) -> int:
    if args.synthetic:
        layers, experts, projections, other = _parse_synthetic(args.synthetic)
        manifest = packfmt.synthetic_manifest(layers, experts, projections, other)
        payloads = packfmt.synthetic_payloads(manifest, args.seed)
    else:
        src = Path(args.input)
        if src.is_dir():
            manifest, payloads = _manifest_from_dir(src)
        else:
            manifest, payloads = packfmt.unpack(src)
    index = packfmt.pack(manifest, payloads, args.out, group=not args.no_group)
    _emit(
        {
            "out": args.out,
            "keys": index.key_count,
            "groups": len(index.groups),
            "copied": len(index.copied),
        }
    )
    return 0


def cmd_unpack(args) -> int:
    manifest, payloads = packfmt.unpack(args.input)
    out = Path(args.out)
    (out / "payloads").mkdir(parents=True, exist_ok=True)
    doc = {
        "tensors": [
            {"name": t.name, "dtype": t.dtype, "shape": list(t.shape)}
            for t in manifest.tensors
        ]
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
    for name, data in payloads.items():
        (out / "payloads" / f"{_safe_name(name)}.bin").write_bytes(data)
    _emit({"out": str(out), "tensors": len(manifest.tensors), "bytes": manifest.total_bytes})
    return 0


def cmd_audit_file(args) -> int:
    result = packfmt.audit(args.input, args.samples, args.seed)
    _emit(
        {
            "keys": result.keys,
            "groups": result.groups,
            "copied": result.copied,
            "sampled": result.sampled,
            "sampled_ok": result.sampled_ok,
            "errors": result.errors,
            "elapsed_s": round(result.elapsed_s, 6),
        }
    )
    return 0 if not result.errors else 1


def cmd_catalog_build(args) -> int:
    layout = catalogmod.CatalogLayout(_data_root(args.root), args.shards, args.per_shard)
    template = (
        catalogmod.AdapterTemplate.from_json(_load_json(args.template))
        if args.template
        else catalogmod.AdapterTemplate()
    )
    store = MetaStore(Path(layout.root) / "meta") if args.register else None
    result = catalogmod.build_catalog(
        layout, template, seed=args.seed, parallelism=args.parallelism, store=store
    )
    _emit(result.to_json())
    return 0 if result.error_count == 0 else 1


def cmd_catalog_audit(args) -> int:
    layout = catalogmod.discover_layout(_data_root(args.root))
    result = catalogmod.audit_catalog(layout, args.samples, args.seed)
    _emit(result.to_json())
    return 0 if not result.errors else 1


def cmd_serve(args) -> int:
    from .controlplane import ControlPlane
    from .httpapi import serve_forever

    plane = ControlPlane(_data_root(args.root))
    serve_forever(plane, args.host, args.port)
    return 0


def _phases_from_doc(doc: dict) -> list[trainersim.PhasePlan]:
    return [
        trainersim.PhasePlan(
            p["policy_id"],
            [
                trainersim.Phase(ph["name"], int(ph["duration_ms"]), ph["resource"])
                for ph in p["phases"]
            ],
        )
        for p in doc["policies"]
    ]


def cmd_trainsim_run(args) -> int:
    if args.config == "4b":
        plans = trainersim.default_4b_plan()
        doc = {"trainers": 1, "samplers": 1}
    else:
        doc = _load_json(args.config)
        plans = _phases_from_doc(doc)
    trainers = doc.get("trainers", 1)
    samplers = doc.get("samplers", 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    modes = ("sequential", "concurrent") if args.mode == "both" else (args.mode,)
    for mode in modes:
        timeline = trainersim.simulate_schedule(plans, mode, trainers, samplers)
        with open(out / f"timeline_{mode}.csv", "w") as fh:
            fh.write("policy,phase,start_ms,end_ms,resource\n")
            for span in timeline.spans:
                fh.write(
                    f"{span.policy_id},{span.phase},{span.start_ms},{span.end_ms},{span.resource}\n"
                )
        summary[mode] = {
            "wall_time_ms": timeline.wall_time_ms,
            "peak_resident_bytes": timeline.peak_resident_bytes,
        }
    if len(modes) == 2:
        summary["speedup"] = round(
            summary["sequential"]["wall_time_ms"] / summary["concurrent"]["wall_time_ms"], 4
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return 0


def _file_resolver(root: Path):
    layout = catalogmod.discover_layout(root)

    def resolve(revision_id: str) -> Path:
        stem = revision_id.split("rev/", 1)[-1]
        candidate = Path(root) / f"{stem}.mtpk"
        if candidate.exists():
            return candidate
        slot = zlib.crc32(revision_id.encode()) % layout.total
        return layout.path(slot // layout.adapters_per_shard, slot % layout.adapters_per_shard)

    return resolve


def cmd_probe_run(args) -> int:
    spec = loadgen.TrafficSpec.from_json(_load_json(args.spec))
    actor_cfg = ActorConfig.from_json(_load_json(args.actor)) if args.actor else ActorConfig()
    resolver = None
    if args.mode != "simulated":
        resolver = _file_resolver(_data_root(args.catalog_root))
    result = run_scenario(actor_cfg, spec, seed=args.seed, mode=args.mode, file_resolver=resolver)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_traces_csv(out / "traces.csv", result.traces)
    report.write_metrics_json(out / "metrics.json", result.stats)
    _emit({"out": str(out), "requests": len(result.traces), **{
        k: v for k, v in result.stats.items() if not isinstance(v, (dict, list))
    }})
    return 0


def cmd_probe_report(args) -> int:
    doc = report.render_report(Path(args.traces), Path(args.out) if args.out else None)
    _emit({"figures": doc["figures"], "metrics": doc["metrics"]})
    return 0


def cmd_fleet_size(args) -> int:
    plan = loadgen.fleet_size(
        args.wave,
        batch_window=args.batch_window,
        gpus_per_engine=args.gpus_per_engine,
        warm_rps_per_engine=args.warm_rps,
        slo_window_s=args.slo_window,
        cold_loads_per_s=args.cold_rate,
        cold_rate_per_engine=args.cold_rate_per_engine,
        cold_cap_per_engine=args.cold_cap,
    )
    _emit(plan.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorafleet",
        description="Adapter-lifecycle control plane and serving/training simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="pack a fanout adapter into the grouped container")
    p.add_argument("--in", dest="input", help="source directory or container file")
    p.add_argument("--synthetic", help="generate a fixture manifest: L,E,P,O")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-group", action="store_true", help="write every tensor as a copy")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unpack", help="expand a container to manifest + payload files")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("audit-file", help="checksum-audit one packed container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_audit_file)

    p = sub.add_parser("catalog", help="sharded catalog operations")
    csub = p.add_subparsers(dest="catalog_command", required=True)
    b = csub.add_parser("build", help="build a sharded packed-adapter catalog")
    b.add_argument("--shards", type=int, required=True)
    b.add_argument("--per-shard", dest="per_shard", type=int, required=True)
    b.add_argument("--root")
    b.add_argument("--template", help="adapter template JSON")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--parallelism", type=int, default=4)
    b.add_argument("--no-register", dest="register", action="store_false",
                   help="skip metastore revision registration")
    b.set_defaults(func=cmd_catalog_build)
    a = csub.add_parser("audit", help="stratified audit across all shards")
    a.add_argument("--root")
    a.add_argument("--samples", type=int, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_catalog_audit)

    p = sub.add_parser("serve", help="run the control-plane HTTP service")
    p.add_argument("--root")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("trainsim", help="trainer schedule simulation")
    tsub = p.add_subparsers(dest="trainsim_command", required=True)
    t = tsub.add_parser("run", help="simulate sequential/concurrent schedules")
    t.add_argument("--config", required=True, help="scenario JSON, or the builtin '4b'")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["sequential", "concurrent", "both"], default="both")
    t.set_defaults(func=cmd_trainsim_run)

    p = sub.add_parser("probe", help="serving traffic probes")
    psub = p.add_subparsers(dest="probe_command", required=True)
    r = psub.add_parser("run", help="run a traffic spec against one actor")
    r.add_argument("--spec", required=True)
    r.add_argument("--actor", help="actor config JSON (defaults apply without it)")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=["simulated", "real-file"], default="simulated")
    r.add_argument("--catalog-root", dest="catalog_root")
    r.set_defaults(func=cmd_probe_run)
    rep = psub.add_parser("report", help="summarize traces and render figures")
    rep.add_argument("--traces", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_probe_report)

    p = sub.add_parser("fleet-size", help="active-wave fleet arithmetic")
    p.add_argument("--wave", type=int, required=True)
    p.add_argument("--batch-window", dest="batch_window", type=int, default=64)
    p.add_argument("--gpus-per-engine", dest="gpus_per_engine", type=int, default=4)
    p.add_argument("--warm-rps", dest="warm_rps", type=float, default=2.57)
    p.add_argument("--slo-window", dest="slo_window", type=float, default=60.0)
    p.add_argument("--cold-rate", dest="cold_rate", type=float, default=38.3)
    p.add_argument("--cold-rate-per-engine", dest="cold_rate_per_engine", type=float, default=0.7)
    p.add_argument("--cold-cap", dest="cold_cap", type=int, default=32)
    p.set_defaults(func=cmd_fleet_size)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pack" and not (args.input or args.synthetic):
        parser.error("pack needs --in or --synthetic")
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
