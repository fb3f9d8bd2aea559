"""Crash-consistent persistence for the CAVE.

The record store is one append-only JSON-lines journal.  Each line is a
complete event; state is rebuilt by replaying them.  A torn final line (a
crash mid-append) is dropped on open; damage anywhere else is refused.
"""

import json
import os
import threading
from pathlib import Path

from .errors import StoreCorrupted
from .protocol import EnrollmentRecord

JOURNAL = "records.jsonl"
AUDIT = "audit.log"


def _dump(event: dict) -> bytes:
    return (json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n").encode()


class _Appender:
    def __init__(self, path: Path, fsync: bool):
        self.path = path
        self.fsync = fsync
        self._fh = open(path, "ab")

    def write(self, data: bytes):
        self._fh.write(data)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()


def read_journal(path: Path) -> list[dict]:
    if not path.exists():
        return []
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    torn = lines.pop()  # b"" when the file ends in a newline
    events = []
    for n, line in enumerate(lines, 1):
        try:
            events.append(json.loads(line))
        except ValueError:
            raise StoreCorrupted(f"{path.name}: unreadable entry on line {n}") from None
    if torn:
        try:
            events.append(json.loads(torn))
        except ValueError:
            pass
        # rewrite without the partial tail so later appends start clean
        with open(path, "r+b") as fh:
            fh.truncate(len(raw) - len(torn))
    return events


class AuditLog:
    """Append-only, line-delimited JSON audit trail."""

    def __init__(self, path, fsync: bool = False):
        self.path = Path(path)
        read_journal(self.path)  # heal a torn tail before appending
        self._out = _Appender(self.path, fsync)
        self._lock = threading.Lock()

    def append(self, event: str, t: float, **fields):
        entry = {"event": event, "t": round(t, 6), **fields}
        with self._lock:
            self._out.write(_dump(entry))

    def entries(self) -> list[dict]:
        return read_journal(self.path)

    def close(self):
        self._out.close()


class RecordStore:
    """Enrollment records keyed by uid digest, plus nonce events."""

    def __init__(self, directory, fsync: bool = False):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.records: dict[int, EnrollmentRecord] = {}
        self.nonce_events: list[dict] = []
        self._lock = threading.RLock()
        self._next_id = 0
        for ev in read_journal(self.dir / JOURNAL):
            self._apply(ev)
        self._out = _Appender(self.dir / JOURNAL, fsync)

    def _apply(self, ev: dict):
        op = ev.get("op")
        if op in ("enroll", "update"):
            rec = EnrollmentRecord.from_dict(ev["record"])
            if op == "update" and rec.record_id not in self.records:
                raise StoreCorrupted(f"update for unknown record {rec.record_id}")
            self.records[rec.record_id] = rec
            self._next_id = max(self._next_id, rec.record_id + 1)
        elif op in ("nonce_issue", "nonce_use"):
            self.nonce_events.append(ev)
        else:
            raise StoreCorrupted(f"unknown journal op {op!r}")

    def _write(self, ev: dict):
        self._out.write(_dump(ev))

    # nonce registries journal through this
    def append(self, event: dict):
        with self._lock:
            self._write(event)
            self.nonce_events.append(event)

    def add(self, record: EnrollmentRecord) -> EnrollmentRecord:
        with self._lock:
            record.record_id = self._next_id
            self._next_id += 1
            self._write({"op": "enroll", "record": record.to_dict()})
            self.records[record.record_id] = record
            return record

    def update(self, record: EnrollmentRecord):
        with self._lock:
            self._write({"op": "update", "record": record.to_dict()})
            self.records[record.record_id] = record

    def for_uid(self, uid_digest: bytes) -> list[EnrollmentRecord]:
        with self._lock:
            return [r for r in self.records.values() if r.uid_digest == uid_digest]

    def live(self) -> list[EnrollmentRecord]:
        return [r for r in self.records.values() if not r.archived]

    def compact(self, nonce_snapshot=None):
        """Rewrite the journal as one event per record (atomic rename)."""
        with self._lock:
            tmp = self.dir / (JOURNAL + ".tmp")
            events = [{"op": "enroll", "record": r.to_dict()}
                      for _, r in sorted(self.records.items())]
            nonces = self.nonce_events if nonce_snapshot is None else nonce_snapshot
            with open(tmp, "wb") as fh:
                for ev in events + list(nonces):
                    fh.write(_dump(ev))
                fh.flush()
                os.fsync(fh.fileno())
            self._out.close()
            os.replace(tmp, self.dir / JOURNAL)
            self.nonce_events = list(nonces)
            self._out = _Appender(self.dir / JOURNAL, self.fsync)

    def close(self):
        self._out.close()
