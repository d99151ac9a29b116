"""Packed adapter container format (MTPK).

Collapses the per-expert tensor fanout of a MoE LoRA adapter into a small
number of stacked group tensors plus verbatim copies of everything else.
The container is a flat file: 16-byte header, UTF-8 JSON index, then
64-byte-aligned payload slabs, each protected by a CRC-32 checksum.
"""

from __future__ import annotations

import json
import math
import random
import re
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

MAGIC = b"MTPK"
VERSION = 0
HEADER = struct.Struct("<4sIQ")  # magic, version, index_length
ALIGNMENT = 64

DTYPE_WIDTHS = {"f32": 4, "bf16": 2, "f16": 2, "u8": 1}
DTYPE_CODES = {"f32": 0, "bf16": 1, "f16": 2, "u8": 3}
DTYPE_NAMES = {code: name for name, code in DTYPE_CODES.items()}

_EXPERT_NAME = re.compile(
    r"^model\.layers\.(\d+)\.mlp\.experts\.(\d+)\.(\w+)\.lora_([AB])\.weight$"
)

_DEFAULT_PROJECTIONS = ("gate", "up", "down")


class PackedFormatError(Exception):
    """Base class for container format failures."""


class HeterogeneousGroup(PackedFormatError):
    pass


class MissingExpert(PackedFormatError):
    pass


class DuplicateName(PackedFormatError):
    pass


class ChecksumMismatch(PackedFormatError):
    def __init__(self, key: str):
        super().__init__(f"checksum mismatch for key {key!r}")
        self.key = key


class TruncatedFile(PackedFormatError):
    pass


class UnknownVersion(PackedFormatError):
    pass


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class TensorSpec:
    """One tensor in the pre-pack fanout: dotted name, dtype, shape."""

    name: str
    dtype: str
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.dtype not in DTYPE_WIDTHS:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ValueError(f"shape must be positive integers, got {self.shape}")

    @property
    def byte_length(self) -> int:
        return math.prod(self.shape) * DTYPE_WIDTHS[self.dtype]


@dataclass(frozen=True)
class LayoutParams:
    layers: int
    experts: int
    expert_projections: int
    other_tensor_count: int


@dataclass
class AdapterManifest:
    """Ordered tensor listing for one adapter in fanout form."""

    tensors: list[TensorSpec]
    layout_params: LayoutParams | None = None

    @property
    def total_bytes(self) -> int:
        return sum(t.byte_length for t in self.tensors)

    def by_name(self) -> dict[str, TensorSpec]:
        return {t.name: t for t in self.tensors}


@dataclass(frozen=True)
class GroupEntry:
    group_name: str
    member_names: tuple[str, ...]
    dtype: str
    stacked_shape: tuple[int, ...]
    payload_offset: int
    payload_length: int
    checksum: int


@dataclass(frozen=True)
class CopiedEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    payload_offset: int
    payload_length: int
    checksum: int


@dataclass
class PackedIndex:
    version: int
    groups: list[GroupEntry]
    copied: list[CopiedEntry]

    @property
    def key_count(self) -> int:
        return len(self.groups) + len(self.copied)


@dataclass
class AuditReport:
    keys: int
    groups: int
    copied: int
    sampled: int
    sampled_ok: int
    errors: list[str]
    elapsed_s: float


@dataclass
class LoadSliceReport:
    read_s: float
    build_s: float
    object_count: int


def projection_names(count: int) -> tuple[str, ...]:
    """Projection labels used by synthetic manifests (gate/up/down then projN)."""
    names = list(_DEFAULT_PROJECTIONS[:count])
    for i in range(len(names), count):
        names.append(f"proj{i}")
    return tuple(names)


def derive_group_key(tensor_name: str) -> tuple[int, str, str] | None:
    """Map an expert LoRA tensor name to its (layer, projection, A|B) group key.

    Names that do not carry an expert segment return None and are stored
    as verbatim copies.
    """
    m = _EXPERT_NAME.match(tensor_name)
    if m is None:
        return None
    return (int(m.group(1)), m.group(3), m.group(4))


def group_name_for_key(key: tuple[int, str, str]) -> str:
    layer, proj, ab = key
    return f"model.layers.{layer}.mlp.experts.{proj}.lora_{ab}.weight"


def expert_index(tensor_name: str) -> int:
    m = _EXPERT_NAME.match(tensor_name)
    if m is None:
        raise ValueError(f"not an expert tensor: {tensor_name}")
    return int(m.group(2))


def synthetic_manifest(
    layers: int,
    experts: int,
    projections: int,
    other: int,
    dtype: str = "f32",
    shape: tuple[int, ...] = (1,),
) -> AdapterManifest:
    """Generate the L*E*P*2 + O fanout used by desk-scale fixtures."""
    projs = projection_names(projections)
    tensors: list[TensorSpec] = []
    for layer in range(layers):
        for expert in range(experts):
            for proj in projs:
                for ab in ("A", "B"):
                    name = (
                        f"model.layers.{layer}.mlp.experts.{expert}"
                        f".{proj}.lora_{ab}.weight"
                    )
                    tensors.append(TensorSpec(name, dtype, shape))
    for i in range(other):
        tensors.append(TensorSpec(f"model.other.{i:05d}.weight", dtype, shape))
    return AdapterManifest(tensors, LayoutParams(layers, experts, projections, other))


def synthetic_payloads(manifest: AdapterManifest, seed: int) -> dict[str, bytes]:
    """Deterministic pseudorandom payload bytes for every manifest tensor."""
    out: dict[str, bytes] = {}
    for spec in manifest.tensors:
        rng = random.Random(f"{seed}:{spec.name}")
        out[spec.name] = rng.randbytes(spec.byte_length)
    return out


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


PayloadSource = Mapping[str, bytes] | Callable[[str], bytes]


def _payload(source: PayloadSource, name: str) -> bytes:
    if callable(source):
        return source(name)
    return source[name]


def _plan_groups(manifest: AdapterManifest, group: bool):
    """Split manifest tensors into group membership and copied names."""
    seen: set[str] = set()
    groups: dict[tuple[int, str, str], list[str]] = {}
    copied: list[TensorSpec] = []
    for spec in manifest.tensors:
        if spec.name in seen:
            raise DuplicateName(spec.name)
        seen.add(spec.name)
        key = derive_group_key(spec.name) if group else None
        if key is None:
            copied.append(spec)
        else:
            groups.setdefault(key, []).append(spec.name)
    return groups, copied


def pack(
    manifest: AdapterManifest,
    payloads: PayloadSource,
    out_path: str | Path,
    group: bool = True,
) -> PackedIndex:
    """Write the packed container for `manifest` and return its index.

    With group=False every tensor is stored as a copy; that ungrouped file
    is the on-disk stand-in for the original fanout representation.
    """
    by_name = manifest.by_name()
    group_plan, copied_specs = _plan_groups(manifest, group)

    group_records = []
    for key in sorted(group_plan, key=group_name_for_key):
        members = sorted(group_plan[key], key=expert_index)
        specs = [by_name[m] for m in members]
        first = specs[0]
        for s in specs[1:]:
            if s.dtype != first.dtype or s.shape != first.shape:
                raise HeterogeneousGroup(
                    f"group {group_name_for_key(key)}: {s.name} has "
                    f"{s.dtype}{list(s.shape)}, expected {first.dtype}{list(first.shape)}"
                )
        indices = [expert_index(m) for m in members]
        if indices != list(range(len(members))):
            raise MissingExpert(
                f"group {group_name_for_key(key)} covers experts {indices}, "
                f"expected 0..{max(indices)}"
            )
        slab = b"".join(_payload(payloads, m) for m in members)
        group_records.append(
            {
                "name": group_name_for_key(key),
                "dtype": DTYPE_CODES[first.dtype],
                "shape": [len(members), *first.shape],
                "members": members,
                "offset": 0,
                "length": len(slab),
                "checksum": crc32(slab),
                "_bytes": slab,
            }
        )
    group_records.sort(key=lambda r: r["name"])

    copied_records = []
    for spec in sorted(copied_specs, key=lambda s: s.name):
        data = _payload(payloads, spec.name)
        copied_records.append(
            {
                "name": spec.name,
                "dtype": DTYPE_CODES[spec.dtype],
                "shape": list(spec.shape),
                "offset": 0,
                "length": len(data),
                "checksum": crc32(data),
                "_bytes": data,
            }
        )

    records = group_records + copied_records

    def render_index() -> bytes:
        doc = {
            "version": VERSION,
            "groups": [
                {k: v for k, v in r.items() if not k.startswith("_")}
                for r in group_records
            ],
            "copied": [
                {k: v for k, v in r.items() if not k.startswith("_")}
                for r in copied_records
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    # Offsets appear inside the index, and the index length moves the payload
    # region, so iterate to a fixed point (digit growth converges quickly).
    index_bytes = render_index()
    for _ in range(8):
        cursor = _align(HEADER.size + len(index_bytes))
        for rec in records:
            rec["offset"] = cursor
            cursor = _align(cursor + rec["length"])
        new_index = render_index()
        if len(new_index) == len(index_bytes):
            index_bytes = new_index
            break
        index_bytes = new_index
    else:
        raise PackedFormatError("index layout failed to converge")

    out_path = Path(out_path)
    with open(out_path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(index_bytes)))
        fh.write(index_bytes)
        pos = HEADER.size + len(index_bytes)
        for rec in records:
            fh.write(b"\0" * (rec["offset"] - pos))
            fh.write(rec["_bytes"])
            pos = rec["offset"] + rec["length"]

    return PackedIndex(
        version=VERSION,
        groups=[
            GroupEntry(
                r["name"],
                tuple(r["members"]),
                DTYPE_NAMES[r["dtype"]],
                tuple(r["shape"]),
                r["offset"],
                r["length"],
                r["checksum"],
            )
            for r in group_records
        ],
        copied=[
            CopiedEntry(
                r["name"],
                DTYPE_NAMES[r["dtype"]],
                tuple(r["shape"]),
                r["offset"],
                r["length"],
                r["checksum"],
            )
            for r in copied_records
        ],
    )


def read_index(path: str | Path) -> PackedIndex:
    """Parse and validate the container header and index without payload reads."""
    with open(path, "rb") as fh:
        header = fh.read(HEADER.size)
        if len(header) < HEADER.size:
            raise TruncatedFile(f"{path}: short header")
        magic, version, index_length = HEADER.unpack(header)
        if magic != MAGIC:
            raise UnknownVersion(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise UnknownVersion(f"{path}: unsupported version {version}")
        index_bytes = fh.read(index_length)
        if len(index_bytes) < index_length:
            raise TruncatedFile(f"{path}: short index")
    try:
        doc = json.loads(index_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackedFormatError(f"{path}: unreadable index: {exc}") from exc
    if doc.get("version") != VERSION:
        raise UnknownVersion(f"{path}: index version {doc.get('version')}")
    groups = [
        GroupEntry(
            r["name"],
            tuple(r["members"]),
            DTYPE_NAMES[r["dtype"]],
            tuple(r["shape"]),
            r["offset"],
            r["length"],
            r["checksum"],
        )
        for r in doc["groups"]
    ]
    copied = [
        CopiedEntry(
            r["name"],
            DTYPE_NAMES[r["dtype"]],
            tuple(r["shape"]),
            r["offset"],
            r["length"],
            r["checksum"],
        )
        for r in doc["copied"]
    ]
    return PackedIndex(VERSION, groups, copied)


def _read_payload(fh, offset: int, length: int, key: str, checksum: int) -> bytes:
    fh.seek(offset)
    data = fh.read(length)
    if len(data) < length:
        raise TruncatedFile(f"key {key!r}: wanted {length} bytes, got {len(data)}")
    if crc32(data) != checksum:
        raise ChecksumMismatch(key)
    return data


def unpack(path: str | Path) -> tuple[AdapterManifest, dict[str, bytes]]:
    """Read a packed container back to the original name -> bytes map."""
    index = read_index(path)
    tensors: list[TensorSpec] = []
    payloads: dict[str, bytes] = {}
    with open(path, "rb") as fh:
        for g in index.groups:
            slab = _read_payload(fh, g.payload_offset, g.payload_length, g.group_name, g.checksum)
            member_shape = g.stacked_shape[1:]
            width = DTYPE_WIDTHS[g.dtype]
            member_len = math.prod(member_shape) * width
            if member_len * len(g.member_names) != len(slab):
                raise PackedFormatError(
                    f"group {g.group_name!r}: slab length {len(slab)} does not "
                    f"cover {len(g.member_names)} members of {member_len} bytes"
                )
            for i, member in enumerate(g.member_names):
                tensors.append(TensorSpec(member, g.dtype, member_shape))
                payloads[member] = slab[i * member_len : (i + 1) * member_len]
        for c in index.copied:
            data = _read_payload(fh, c.payload_offset, c.payload_length, c.name, c.checksum)
            tensors.append(TensorSpec(c.name, c.dtype, c.shape))
            payloads[c.name] = data
    tensors.sort(key=lambda t: t.name)
    return AdapterManifest(tensors), payloads


def audit(path: str | Path, sample_count: int, seed: int) -> AuditReport:
    """Open the index and checksum-verify a seeded sample of keys.

    Per-key failures are collected, not raised, so one damaged slab does
    not abort the remaining samples.
    """
    start = time.monotonic()
    index = read_index(path)
    keys: list[tuple[str, int, int, int]] = [
        (g.group_name, g.payload_offset, g.payload_length, g.checksum)
        for g in index.groups
    ] + [(c.name, c.payload_offset, c.payload_length, c.checksum) for c in index.copied]

    rng = random.Random(seed)
    if sample_count >= len(keys):
        chosen = list(keys)
        rng.shuffle(chosen)
        chosen = chosen[: sample_count if sample_count <= len(keys) else len(keys)]
    else:
        chosen = rng.sample(keys, sample_count)

    ok = 0
    errors: list[str] = []
    with open(path, "rb") as fh:
        for name, offset, length, checksum in chosen:
            try:
                _read_payload(fh, offset, length, name, checksum)
                ok += 1
            except PackedFormatError as exc:
                errors.append(str(exc))
    return AuditReport(
        keys=index.key_count,
        groups=len(index.groups),
        copied=len(index.copied),
        sampled=len(chosen),
        sampled_ok=ok,
        errors=errors,
        elapsed_s=time.monotonic() - start,
    )


def measure_load_slices(path: str | Path) -> LoadSliceReport:
    """Time the read and loader-object-build slices for one container."""
    t0 = time.monotonic()
    index = read_index(path)
    raw: list[tuple] = []
    with open(path, "rb") as fh:
        for g in index.groups:
            fh.seek(g.payload_offset)
            raw.append((g.group_name, g.dtype, g.stacked_shape, fh.read(g.payload_length)))
        for c in index.copied:
            fh.seek(c.payload_offset)
            raw.append((c.name, c.dtype, c.shape, fh.read(c.payload_length)))
    t1 = time.monotonic()
    objects = {name: {"dtype": dtype, "shape": shape, "data": data}
               for name, dtype, shape, data in raw}
    t2 = time.monotonic()
    return LoadSliceReport(read_s=t1 - t0, build_s=t2 - t1, object_count=len(objects))


def compare_load_slices(original_path: str | Path, packed_path: str | Path) -> dict:
    """Measure both container forms of one adapter and report the object ratio."""
    original = measure_load_slices(original_path)
    packed = measure_load_slices(packed_path)
    return {
        "original": original,
        "packed": packed,
        "object_ratio": original.object_count / packed.object_count,
    }


def scan_layout(path: str | Path) -> list[tuple[str, int, int]]:
    """Return (key, offset, length) in file order for structural checks."""
    index = read_index(path)
    rows = [(g.group_name, g.payload_offset, g.payload_length) for g in index.groups]
    rows += [(c.name, c.payload_offset, c.payload_length) for c in index.copied]
    rows.sort(key=lambda r: r[1])
    return rows
