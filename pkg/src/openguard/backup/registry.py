from __future__ import annotations

import enum
import json
import os
import threading
from dataclasses import dataclass, replace
from typing import Iterator

from ..events.model import BACKUP_SUFFIX


class BackupStatus(str, enum.Enum):
    CREATED = "created"
    RESTORED = "restored"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class BackupRecord:
    original_path: str
    backup_path: str
    content_hash: str
    size: int
    created_at: int
    status: BackupStatus = BackupStatus.CREATED

    @classmethod
    def for_path(cls, original_path: str, content_hash: str, size: int, created_at: int,
                 suffix: str = BACKUP_SUFFIX) -> "BackupRecord":
        return cls(original_path, original_path + suffix, content_hash, size, created_at)

    def with_status(self, status: BackupStatus) -> "BackupRecord":
        return replace(self, status=status)


class Journal:
    """Append-only line-delimited log of registry mutations."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._lock = threading.Lock()

    def append(self, op: str, record: BackupRecord, ts_ns: int) -> None:
        line = json.dumps({"op": op, "original_path": record.original_path,
                           "digest": record.content_hash, "size": record.size, "ts_ns": ts_ns},
                          separators=(",", ":"))
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def replay(self, suffix: str = BACKUP_SUFFIX) -> dict[str, BackupRecord]:
        entries: dict[str, BackupRecord] = {}
        if not os.path.exists(self.path):
            return entries
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                op, path = rec["op"], rec["original_path"]
                if op == "create":
                    entries[path] = BackupRecord.for_path(path, rec["digest"], rec.get("size", 0),
                                                          rec["ts_ns"], suffix)
                elif path in entries:
                    status = BackupStatus.RESTORED if op == "restore" else BackupStatus.FINALIZED
                    entries[path] = entries[path].with_status(status)
        return entries


class BackupRegistry:
    """original_path -> BackupRecord, with atomic check-and-reserve.

    A path holds at most one record. Paths whose record is still ``created``
    (or whose copy is in flight) are considered backed up.
    """

    def __init__(self, journal: Journal | None = None, suffix: str = BACKUP_SUFFIX):
        self.entries: dict[str, BackupRecord] = {}
        self.drop_count = 0
        self.journal = journal
        self._inflight: set[str] = set()
        self._lock = threading.Lock()
        if journal is not None:
            self.entries.update(journal.replay(suffix))

    def is_backed_up(self, path: str) -> bool:
        with self._lock:
            return self._protected(path)

    def _protected(self, path):
        rec = self.entries.get(path)
        return path in self._inflight or (rec is not None and rec.status is BackupStatus.CREATED)

    def reserve(self, path: str) -> bool:
        with self._lock:
            if self._protected(path):
                return False
            self._inflight.add(path)
            return True

    def release(self, path: str, dropped: bool = False) -> None:
        with self._lock:
            self._inflight.discard(path)
            if dropped:
                self.drop_count += 1

    def commit(self, record: BackupRecord) -> None:
        with self._lock:
            self._inflight.discard(record.original_path)
            self.entries[record.original_path] = record
        if self.journal is not None:
            self.journal.append("create", record, record.created_at)

    def set_status(self, path: str, status: BackupStatus, ts_ns: int) -> BackupRecord:
        with self._lock:
            rec = self.entries[path] = self.entries[path].with_status(status)
        if self.journal is not None:
            op = "restore" if status is BackupStatus.RESTORED else "finalize"
            self.journal.append(op, rec, ts_ns)
        return rec

    def get(self, path: str) -> BackupRecord | None:
        with self._lock:
            return self.entries.get(path)

    def records(self, status: BackupStatus | None = None) -> list[BackupRecord]:
        with self._lock:
            recs = list(self.entries.values())
        if status is not None:
            recs = [r for r in recs if r.status is status]
        return sorted(recs, key=lambda r: r.original_path)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, path):
        return path in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.entries))
