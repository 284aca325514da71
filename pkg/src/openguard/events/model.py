from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from ..errors import EmptyFragments, InvalidComponent

BACKUP_SUFFIX = ".tmp"
PARTIAL_SUFFIX = ".partial"
COMM_LEN = 16


class SourceKind(str, enum.Enum):
    KERNEL_PROBE = "kernel_probe"
    FS_NOTIFY = "fs_notify"
    TRACE_REPLAY = "trace_replay"


def check_absolute(path: str) -> str:
    if not path.startswith("/"):
        raise ValueError(f"not an absolute path: {path!r}")
    if path != "/" and ("//" in path or path.endswith("/")):
        raise ValueError(f"path has empty components: {path!r}")
    return path


@dataclass(frozen=True, slots=True)
class FileOpenEvent:
    pid: int
    ppid: int
    comm: str
    timestamp: int  # monotonic ns
    path: str
    source: SourceKind = SourceKind.TRACE_REPLAY

    def __post_init__(self):
        check_absolute(self.path)
        if len(self.comm) > COMM_LEN:
            object.__setattr__(self, "comm", self.comm[:COMM_LEN])

    def to_record(self) -> dict:
        return {"ts_ns": self.timestamp, "pid": self.pid, "ppid": self.ppid,
                "comm": self.comm, "path": self.path}


@dataclass(frozen=True, slots=True)
class PathFragmentBatch:
    """Path components as delivered by the kernel hook, leaf first."""

    pid: int
    seq: int
    fragments: tuple[str, ...]


def reconstruct_path(batch: PathFragmentBatch | Sequence[str]) -> str:
    fragments = batch.fragments if isinstance(batch, PathFragmentBatch) else batch
    if not fragments:
        raise EmptyFragments("no path components")
    for frag in fragments:
        if not frag or "/" in frag or "\0" in frag:
            raise InvalidComponent(f"bad path component {frag!r}")
    return "/" + "/".join(reversed(fragments))


def fragments_of(path: str) -> tuple[str, ...]:
    """Inverse of :func:`reconstruct_path`."""
    check_absolute(path)
    return tuple(reversed(path.strip("/").split("/")))


def _is_under(path: str, root: str) -> bool:
    if root == "/":
        return True
    return path == root or path.startswith(root + "/")


@dataclass(frozen=True)
class ProtectedScope:
    directories: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        norm = []
        for d in self.directories:
            d = os.fspath(d)
            if not os.path.isabs(d):
                raise ValueError(f"scope entry must be absolute: {d!r}")
            norm.append(os.path.normpath(d))
        # drop entries nested under another entry
        kept = sorted(set(norm), key=lambda p: (p.count("/"), p))
        out: list[str] = []
        for d in kept:
            if not any(_is_under(d, k) for k in out):
                out.append(d)
        object.__setattr__(self, "directories", tuple(sorted(out)))

    @classmethod
    def of(cls, *dirs) -> "ProtectedScope":
        if len(dirs) == 1 and not isinstance(dirs[0], (str, os.PathLike)):
            dirs = tuple(dirs[0])
        return cls(tuple(os.fspath(d) for d in dirs))

    def contains(self, path: str) -> bool:
        return any(_is_under(path, d) for d in self.directories)

    def __contains__(self, path: str) -> bool:
        return self.contains(path)

    def count_files(self) -> int:
        n = 0
        for d in self.directories:
            for _, _, files in os.walk(d):
                n += sum(1 for f in files if not is_backup_artifact(f))
        return n


def is_backup_artifact(path: str, suffix: str = BACKUP_SUFFIX) -> bool:
    return path.endswith(suffix) or path.endswith(suffix + PARTIAL_SUFFIX)


def filter_events(events: Iterable[FileOpenEvent], scope: ProtectedScope,
                  suffix: str = BACKUP_SUFFIX) -> Iterator[FileOpenEvent]:
    """Keep in-scope events and drop the engine's own backup files."""
    for ev in events:
        if scope.contains(ev.path) and not is_backup_artifact(ev.path, suffix):
            yield ev
