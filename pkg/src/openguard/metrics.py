"""Backup ratio, protected fraction and per-trial experiment reports."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .detection import DetectionTimings
from .errors import NegativeCount, ParseError

SCHEMA = "openguard.experiment/1"


@dataclass(frozen=True)
class Percent:
    """An exact percentage. ``vacuous`` marks the 100 reported when nothing was encrypted."""

    value: Fraction
    vacuous: bool = False

    def __float__(self) -> float:
        return float(self.value)

    def rounded(self) -> str:
        return f"{float(self.value):.2f}"


FULLY_PROTECTED = Percent(Fraction(100), vacuous=True)


def backup_ratio(backup_files: int, encrypted_files: int) -> Percent:
    """``backup_files / encrypted_files * 100``, exact. Values above 100 are legal."""
    if backup_files < 0 or encrypted_files < 0:
        raise NegativeCount(f"counts must be >= 0, got B={backup_files}, E={encrypted_files}")
    if encrypted_files == 0:
        return FULLY_PROTECTED
    return Percent(Fraction(backup_files * 100, encrypted_files))


def protected_fraction(encrypted: Iterable[str], validly_backed_up: Iterable[str]) -> Percent:
    """Share of encrypted files that had a snapshot of their original content."""
    enc = set(encrypted)
    if not enc:
        return FULLY_PROTECTED
    return Percent(Fraction(len(enc & set(validly_backed_up)) * 100, len(enc)))


@dataclass
class ExperimentReport:
    mode: str
    trial: int
    classifier_name: str
    encrypted_files: int
    backup_files: int
    backup_ratio: float
    protected_fraction: float
    vacuous: bool = False
    timings: DetectionTimings | None = None
    first_restore_at: int | None = None
    drops: int = 0
    duration: int = 0
    events_seen: int = 0
    incidents: int = 0
    kill_tree_size: int = 0
    restored: int = 0
    restore_mismatches: list[str] = field(default_factory=list)
    profile: str = ""
    source: str = ""
    failure: str | None = None

    @classmethod
    def from_counts(cls, mode: str, trial: int, classifier_name: str, encrypted: set[str],
                    backed_up: int, valid: set[str], **kw) -> "ExperimentReport":
        ratio = backup_ratio(backed_up, len(encrypted))
        pf = protected_fraction(encrypted, valid)
        return cls(mode, trial, classifier_name, len(encrypted), backed_up, float(ratio),
                   float(pf), ratio.vacuous, **kw)

    @classmethod
    def failed(cls, mode: str, trial: int, classifier_name: str, reason: str, **kw):
        return cls(mode, trial, classifier_name, 0, 0, math.nan, math.nan, failure=reason, **kw)

    def to_record(self) -> dict:
        d = asdict(self)
        d["timings"] = None if self.timings is None else {
            "activity_start": self.timings.activity_start,
            "classified_at": self.timings.classified_at,
            "killed_at": self.timings.killed_at,
        }
        for k in ("backup_ratio", "protected_fraction"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return {"schema": SCHEMA, "kind": "trial", **d}

    @classmethod
    def from_record(cls, rec: dict) -> "ExperimentReport":
        rec = {k: v for k, v in rec.items() if k not in ("schema", "kind")}
        t = rec.get("timings")
        rec["timings"] = None if t is None else DetectionTimings(**t)
        for k in ("backup_ratio", "protected_fraction"):
            if rec.get(k) is None:
                rec[k] = math.nan
        return cls(**rec)


def _seconds(ns: int | None) -> str:
    """Seconds at two significant figures."""
    if ns is None:
        return "-"
    return f"{float(f'{ns / 1e9:.2g}'):g}"


COLUMNS = ("mode", "trial", "B", "E", "ratio", "protected_fraction", "response", "kill",
           "detection")


def _row(r: ExperimentReport) -> tuple[str, ...]:
    t = r.timings
    if r.failure:
        ratio = pf = "failed"
    else:
        ratio = f"{r.backup_ratio:.2f}" + ("*" if r.vacuous else "")
        pf = f"{r.protected_fraction:.2f}"
    return (r.mode, str(r.trial), str(r.backup_files), str(r.encrypted_files), ratio, pf,
            _seconds(t.response_time if t else None), _seconds(t.kill_time if t else None),
            _seconds(t.detection_time if t else None))


def summarize(reports: Sequence[ExperimentReport]) -> dict:
    """Per-mode means over the successful trials."""
    out: dict[str, dict] = {}
    for mode in sorted({r.mode for r in reports}):
        ok = [r for r in reports if r.mode == mode and not r.failure]
        timed = [r.timings for r in ok if r.timings]
        mean = (lambda xs: sum(xs) / len(xs) if xs else None)
        out[mode] = {
            "trials": len([r for r in reports if r.mode == mode]),
            "failed": len([r for r in reports if r.mode == mode and r.failure]),
            "mean_backup_ratio": mean([r.backup_ratio for r in ok]),
            "mean_protected_fraction": mean([r.protected_fraction for r in ok]),
            "mean_response_ns": mean([t.response_time for t in timed]),
            "mean_kill_ns": mean([t.kill_time for t in timed]),
            "mean_detection_ns": mean([t.detection_time for t in timed]),
        }
    return out


def render_table(reports: Sequence[ExperimentReport]) -> str:
    rows = [COLUMNS] + [_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    if any(r.vacuous for r in reports):
        lines.append("* nothing encrypted: reported as 100 (vacuous)")
    return "\n".join(lines) + "\n"


def render_machine(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    for r in reports:
        buf.write(json.dumps(r.to_record(), sort_keys=True, separators=(",", ":")) + "\n")
    summary = {"schema": SCHEMA, "kind": "summary", "modes": summarize(reports)}
    buf.write(json.dumps(summary, sort_keys=True, separators=(",", ":")) + "\n")
    return buf.getvalue()


def render_report(reports: Sequence[ExperimentReport], path=None) -> tuple[str, str]:
    """Human table and machine text (one line per trial plus a summary line).

    Pure: values are formatted, never recomputed. The machine text is written
    to ``path`` when given.
    """
    table, machine = render_table(reports), render_machine(reports)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(machine)
    return table, machine


def parse_reports(text: str) -> list[ExperimentReport]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), n) from None
        if rec.get("schema") != SCHEMA:
            raise ParseError(f"unsupported schema {rec.get('schema')!r}", n)
        if rec.get("kind") == "trial":
            try:
                out.append(ExperimentReport.from_record(rec))
            except TypeError as exc:
                raise ParseError(str(exc), n) from None
    return out


def load_reports(path) -> list[ExperimentReport]:
    with open(path, encoding="utf-8") as fh:
        return parse_reports(fh.read())
