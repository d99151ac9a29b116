"""Append-only durable metadata log with commit-then-visible semantics.

A record (checkpoint, revision, rollout record, operation result, ...)
becomes visible only once its log entry is flushed. Work-in-progress files
live in isolated attempt directories; commit renames the attempt into the
object area and then appends the entry, so a crash at any point leaves
either the pre-commit or the post-commit view, never a partial one.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import threading
import time
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

KINDS = frozenset(
    {"checkpoint", "revision", "rollout_record", "op_result", "policy", "session", "readiness"}
)

LOG_NAME = "metastore.log"


class MetaStoreError(Exception):
    pass


class MissingFile(MetaStoreError):
    pass


class DigestMismatch(MetaStoreError):
    pass


class DuplicateCommit(MetaStoreError):
    pass


class CorruptInterior(MetaStoreError):
    pass


@dataclass(frozen=True)
class AttemptPath:
    token: str
    directory: Path
    created_at_ms: int
    owner_op: str


@dataclass(frozen=True)
class CommitEntry:
    seq: int
    timestamp_ms: int
    kind: str
    subject_id: str
    payload_digest: str
    file_refs: tuple[str, ...]
    op_id: str
    attempt_token: str
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "ts": self.timestamp_ms,
                "kind": self.kind,
                "subject": self.subject_id,
                "digest": self.payload_digest,
                "files": list(self.file_refs),
                "op": self.op_id,
                "attempt": self.attempt_token,
                "meta": self.meta,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @staticmethod
    def from_json(body: str) -> "CommitEntry":
        doc = json.loads(body)
        return CommitEntry(
            seq=doc["seq"],
            timestamp_ms=doc["ts"],
            kind=doc["kind"],
            subject_id=doc["subject"],
            payload_digest=doc["digest"],
            file_refs=tuple(doc["files"]),
            op_id=doc["op"],
            attempt_token=doc["attempt"],
            meta=doc.get("meta", {}),
        )


def compute_digest(file_refs: Iterable[Path], meta: dict | None = None) -> str:
    """Content digest over sorted file bytes plus the canonical meta JSON."""
    h = hashlib.sha256()
    for path in sorted(Path(p) for p in file_refs):
        h.update(path.name.encode())
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\1")
    if meta:
        h.update(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()


def _line_crc(body: str) -> str:
    return "%08x" % (zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF)


class MetaStore:
    """Single-store durability: one serialized committer, concurrent readers."""

    def __init__(self, root: str | Path, clock: Callable[[], float] = time.time, fsync: bool = True):
        self.root = Path(root)
        self.clock = clock
        self.fsync = fsync
        self.attempts_dir = self.root / "attempts"
        self.objects_dir = self.root / "objects"
        self.log_path = self.root / LOG_NAME
        self.root.mkdir(parents=True, exist_ok=True)
        self.attempts_dir.mkdir(exist_ok=True)
        self.objects_dir.mkdir(exist_ok=True)
        self._lock = threading.Lock()
        self._entries: list[CommitEntry] = []
        self._by_attempt: dict[tuple[str, str], CommitEntry] = {}
        self._next_seq = 0
        self.torn_tail_discarded = False
        # test hook: called with a site name at each step of the commit path
        self._crash_hook: Callable[[str], None] | None = None
        self._replay_log()

    # -- recovery ---------------------------------------------------------

    def _replay_log(self):
        if not self.log_path.exists():
            return
        raw = self.log_path.read_bytes()
        if not raw:
            return
        lines = raw.split(b"\n")
        trailing_incomplete = lines[-1] != b""
        records = [ln for ln in lines if ln != b""]
        entries: list[CommitEntry] = []
        for i, line in enumerate(records):
            is_last = i == len(records) - 1
            entry = self._parse_line(line)
            if entry is None or (is_last and trailing_incomplete):
                if is_last:
                    self.torn_tail_discarded = True
                    break
                raise CorruptInterior(f"record {i} failed checksum or parse")
            if entries and entry.seq != entries[-1].seq + 1:
                raise CorruptInterior(f"sequence gap before seq {entry.seq}")
            entries.append(entry)
        if self.torn_tail_discarded:
            # rewrite the log without the torn record so later appends are clean
            good = "".join(e.to_json() + "#crc=" + _line_crc(e.to_json()) + "\n" for e in entries)
            self.log_path.write_text(good, encoding="utf-8")
        self._entries = entries
        self._by_attempt = {(e.op_id, e.attempt_token): e for e in entries}
        self._next_seq = entries[-1].seq + 1 if entries else 0

    @staticmethod
    def _parse_line(line: bytes) -> CommitEntry | None:
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError:
            return None
        body, sep, crc = text.rpartition("#crc=")
        if not sep or len(crc) != 8:
            return None
        if _line_crc(body) != crc:
            return None
        try:
            return CommitEntry.from_json(body)
        except (json.JSONDecodeError, KeyError):
            return None

    def orphan_attempts(self) -> list[Path]:
        """Attempt directories not named by any committed entry."""
        referenced = {e.attempt_token for e in self._entries}
        out = []
        for d in sorted(self.attempts_dir.iterdir()) if self.attempts_dir.exists() else []:
            if d.is_dir() and d.name not in referenced:
                out.append(d)
        return out

    # -- attempt / commit -------------------------------------------------

    def begin_attempt(self, op_id: str, kind: str) -> AttemptPath:
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        token = uuid.uuid4().hex
        directory = self.attempts_dir / token
        directory.mkdir()
        return AttemptPath(
            token=token,
            directory=directory,
            created_at_ms=int(self.clock() * 1000),
            owner_op=op_id,
        )

    def _crash(self, site: str):
        if self._crash_hook is not None:
            self._crash_hook(site)

    def commit(
        self,
        op_id: str,
        attempt: AttemptPath,
        kind: str,
        subject_id: str,
        file_refs: Iterable[str | Path] = (),
        meta: dict | None = None,
        digest: str | None = None,
    ) -> CommitEntry:
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        meta = meta or {}
        file_refs = [Path(p) for p in file_refs]
        with self._lock:
            self._crash("start")
            prior = self._by_attempt.get((op_id, attempt.token))
            if prior is not None:
                want = digest
                if want is None and not file_refs:
                    want = compute_digest([], meta)
                if want is not None and want != prior.payload_digest:
                    raise DuplicateCommit(
                        f"attempt {attempt.token} already committed with different content"
                    )
                # retried commit with files already moved: trust the recorded digest
                return prior

            for ref in file_refs:
                if not ref.exists():
                    raise MissingFile(str(ref))
            actual = compute_digest(file_refs, meta)
            if digest is not None and digest != actual:
                raise DigestMismatch(f"expected {digest}, files hash to {actual}")
            self._crash("after_verify")

            final_refs: list[str] = []
            if file_refs:
                dest = self.objects_dir / actual[:2] / f"{actual[2:10]}-{attempt.token}"
                dest.parent.mkdir(exist_ok=True)
                os.rename(attempt.directory, dest)
                for ref in file_refs:
                    final_refs.append(str(dest / ref.relative_to(attempt.directory)))
            self._crash("after_move")

            entry = CommitEntry(
                seq=self._next_seq,
                timestamp_ms=int(self.clock() * 1000),
                kind=kind,
                subject_id=subject_id,
                payload_digest=actual,
                file_refs=tuple(final_refs),
                op_id=op_id,
                attempt_token=attempt.token,
                meta=meta,
            )
            body = entry.to_json()
            line = f"{body}#crc={_line_crc(body)}\n".encode("utf-8")
            with open(self.log_path, "ab") as fh:
                if self._crash_hook is not None:
                    # torn-write simulation needs the partial bytes on disk
                    fh.write(line[: len(line) // 2])
                    fh.flush()
                    os.fsync(fh.fileno())
                    self._crash("mid_write")
                    fh.write(line[len(line) // 2 :])
                else:
                    fh.write(line)
                fh.flush()
                self._crash("after_write")
                if self.fsync:
                    os.fsync(fh.fileno())
            self._crash("after_flush")

            self._entries.append(entry)
            self._by_attempt[(op_id, attempt.token)] = entry
            self._next_seq += 1
            return entry

    # -- reads ------------------------------------------------------------

    def list_visible(self, kind: str | None = None, subject_id: str | None = None) -> list[CommitEntry]:
        with self._lock:
            snapshot = list(self._entries)
        return [
            e
            for e in snapshot
            if (kind is None or e.kind == kind)
            and (subject_id is None or e.subject_id == subject_id)
        ]

    def last_visible(self, kind: str, subject_id: str) -> CommitEntry | None:
        entries = self.list_visible(kind, subject_id)
        return entries[-1] if entries else None

    def entry_count(self) -> int:
        with self._lock:
            return len(self._entries)

    # -- cleanup ----------------------------------------------------------

    def gc_orphans(self, older_than_s: float = 3600.0) -> list[Path]:
        """Remove attempt dirs that no committed entry names and that are old enough."""
        now_ms = int(self.clock() * 1000)
        removed = []
        for d in self.orphan_attempts():
            age_ms = now_ms - int(d.stat().st_mtime * 1000)
            if age_ms < older_than_s * 1000:
                continue
            try:
                shutil.rmtree(d)
                removed.append(d)
            except OSError:
                continue  # skip-and-report: unremovable paths stay listed as orphans
        return removed


def recover(root: str | Path, clock: Callable[[], float] = time.time) -> tuple[MetaStore, list[Path]]:
    """Reopen a store from its log and enumerate orphan attempt dirs."""
    store = MetaStore(root, clock=clock)
    return store, store.orphan_attempts()
