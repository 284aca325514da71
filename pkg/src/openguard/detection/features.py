from __future__ import annotations

import os
from dataclasses import astuple, dataclass
from typing import Iterable, Sequence

from ..errors import NoEventsForPid
from ..events.model import FileOpenEvent

WINDOW_NS = 1_000_000_000
STRIDE_NS = 250_000_000
BURST_NS = 100_000_000

FEATURE_NAMES = ("opens_per_sec", "distinct_extensions", "distinct_dirs", "open_burst_max",
                 "scope_coverage")


@dataclass(frozen=True)
class FeatureVector:
    pid: int
    window_start: int
    window_end: int
    opens_per_sec: float
    distinct_extensions: int
    distinct_dirs: int
    open_burst_max: int
    scope_coverage: float

    def __post_init__(self):
        if self.window_end <= self.window_start:
            raise ValueError("window_end must be after window_start")
        if min(self.opens_per_sec, self.distinct_extensions, self.distinct_dirs,
               self.open_burst_max) < 0:
            raise ValueError("negative feature count")
        if not 0.0 <= self.scope_coverage <= 1.0:
            raise ValueError("scope_coverage outside [0, 1]")

    def values(self) -> tuple[float, ...]:
        return astuple(self)[3:]

    @classmethod
    def zero(cls, pid: int = 0, window_end: int = WINDOW_NS, window_ns: int = WINDOW_NS):
        return cls(pid, window_end - window_ns, window_end, 0.0, 0, 0, 0, 0.0)


def extension_of(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[1].lower()


def burst_max(timestamps: Sequence[int], width_ns: int = BURST_NS) -> int:
    """Largest number of timestamps inside any half-open interval of ``width_ns``."""
    ts = sorted(timestamps)
    best = lo = 0
    for hi, t in enumerate(ts):
        while t - ts[lo] >= width_ns:
            lo += 1
        best = max(best, hi - lo + 1)
    return best


def collect_features(events: Iterable[FileOpenEvent], pid: int, window_end: int | None = None,
                     window_ns: int = WINDOW_NS, scope_file_count: int = 0,
                     burst_ns: int = BURST_NS) -> FeatureVector:
    """Features of ``pid`` over the window ``(window_end - window_ns, window_end]``.

    ``window_end`` defaults to the pid's latest event. ``scope_coverage`` is
    the number of distinct paths touched divided by ``scope_file_count``
    (zero when the scope size is unknown).
    """
    mine = [ev for ev in events if ev.pid == pid]
    if window_end is None and mine:
        window_end = max(ev.timestamp for ev in mine)
    if window_end is not None:
        start = window_end - window_ns
        mine = [ev for ev in mine if start < ev.timestamp <= window_end]
    if not mine:
        raise NoEventsForPid(pid)
    paths = {ev.path for ev in mine}
    exts = {extension_of(p) for p in paths} - {""}
    dirs = {os.path.dirname(p) for p in paths}
    coverage = min(1.0, len(paths) / scope_file_count) if scope_file_count > 0 else 0.0
    return FeatureVector(
        pid=pid,
        window_start=window_end - window_ns,
        window_end=window_end,
        opens_per_sec=len(mine) * 1e9 / window_ns,
        distinct_extensions=len(exts),
        distinct_dirs=len(dirs),
        open_burst_max=burst_max([ev.timestamp for ev in mine], burst_ns),
        scope_coverage=coverage,
    )
