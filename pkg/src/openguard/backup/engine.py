from __future__ import annotations

import enum
import hashlib
import logging
import os
import stat
import threading
import time
from dataclasses import dataclass, field

from ..errors import BackupMissing, CopyFailed, NotARegularFile, NotRegistered, RenameFailed, \
    SignalDenied
from ..events.model import BACKUP_SUFFIX, PARTIAL_SUFFIX, FileOpenEvent, ProtectedScope
from ..proc import ProcessControl
from .registry import BackupRecord, BackupRegistry, BackupStatus, Journal

log = logging.getLogger(__name__)

CHUNK = 1 << 20
DEFAULT_MAX_FILE_SIZE = 1 << 30
DEFAULT_SUSPEND_TIMEOUT_S = 0.5


class GuardAction(str, enum.Enum):
    BACKED_UP = "backed_up"
    ALREADY_BACKED_UP = "already_backed_up"
    OUT_OF_SCOPE = "out_of_scope"
    PROCESS_VANISHED = "process_vanished"
    COPY_FAILED = "copy_failed"
    SKIPPED_TOO_LARGE = "skipped_too_large"


@dataclass(frozen=True)
class GuardOutcome:
    action: GuardAction
    path: str
    suspend_duration: int = 0
    flags: frozenset[str] = frozenset()
    record: BackupRecord | None = None
    pid: int | None = None
    error: str | None = None


class RestoreAction(str, enum.Enum):
    RESTORED = "restored"
    UNCHANGED = "unchanged"


@dataclass(frozen=True)
class RestoreOutcome:
    action: RestoreAction
    path: str
    ts_ns: int


@dataclass
class RestoreSummary:
    restored: int = 0
    backup_missing: int = 0
    failed: int = 0
    first_restore_at: int | None = None
    errors: list[str] = field(default_factory=list)

    def merge(self, other: "RestoreSummary") -> None:
        self.restored += other.restored
        self.backup_missing += other.backup_missing
        self.failed += other.failed
        if other.first_restore_at is not None and (
                self.first_restore_at is None or other.first_restore_at < self.first_restore_at):
            self.first_restore_at = other.first_restore_at
        self.errors.extend(other.errors)

    def to_dict(self) -> dict:
        return {"restored": self.restored, "backup_missing": self.backup_missing,
                "failed": self.failed}


class ShutdownPolicy(str, enum.Enum):
    REMOVE_BACKUPS = "remove_backups"
    RESTORE_MISSING_ORIGINALS = "restore_missing_originals"


@dataclass
class FinalizeSummary:
    deleted: int = 0
    renamed: int = 0
    errors: list[str] = field(default_factory=list)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(CHUNK):
            h.update(chunk)
    return h.hexdigest()


class BackupEngine:
    """Snapshot files to a ``.tmp`` sibling on first guarded open.

    ``copy_delay_s`` injects an artificial delay into every snapshot attempt
    (used to compare the blocking and non-blocking architectures); it is zero
    in normal operation.
    """

    def __init__(self, scope: ProtectedScope, *, suffix: str = BACKUP_SUFFIX,
                 control: ProcessControl | None = None, journal_path: str | None = None,
                 suspend_timeout_s: float = DEFAULT_SUSPEND_TIMEOUT_S,
                 max_file_size: int = DEFAULT_MAX_FILE_SIZE, copy_delay_s: float = 0.0,
                 clock=time.monotonic_ns):
        self.scope = scope
        self.suffix = suffix
        self.control = control if control is not None else ProcessControl()
        self.registry = BackupRegistry(Journal(journal_path) if journal_path else None, suffix)
        self.suspend_timeout_s = suspend_timeout_s
        self.max_file_size = max_file_size
        self.copy_delay_s = copy_delay_s
        self.clock = clock
        self._finalized = False
        self._finalize_lock = threading.Lock()

    # -- snapshot -----------------------------------------------------------

    def _copy(self, src: str) -> BackupRecord:
        dst = src + self.suffix
        partial = dst + PARTIAL_SUFFIX
        h = hashlib.sha256()
        size = 0
        try:
            with open(src, "rb") as fin, open(partial, "wb") as fout:
                while chunk := fin.read(CHUNK):
                    h.update(chunk)
                    fout.write(chunk)
                    size += len(chunk)
            os.replace(partial, dst)
        except BaseException:
            try:
                os.unlink(partial)
            except OSError:
                pass
            raise
        return BackupRecord.for_path(src, h.hexdigest(), size, self.clock(), self.suffix)

    def _check_regular(self, path: str) -> int:
        st = os.stat(path)
        if not stat.S_ISREG(st.st_mode):
            raise NotARegularFile(path)
        return st.st_size

    def create_backup_file(self, file_path: str, scope: ProtectedScope | None = None) -> GuardOutcome:
        scope = scope or self.scope
        if not scope.contains(file_path):
            return GuardOutcome(GuardAction.OUT_OF_SCOPE, file_path)
        if not self.registry.reserve(file_path):
            return GuardOutcome(GuardAction.ALREADY_BACKED_UP, file_path)
        if self.copy_delay_s:
            # charged per attempt, before the source is touched, like slow backup storage
            time.sleep(self.copy_delay_s)
        try:
            size = self._check_regular(file_path)
            if size > self.max_file_size:
                self.registry.release(file_path)
                return GuardOutcome(GuardAction.SKIPPED_TOO_LARGE, file_path,
                                    flags=frozenset({"too_large"}))
            record = self._copy(file_path)
        except NotARegularFile:
            self.registry.release(file_path)
            raise
        except OSError as exc:
            self.registry.release(file_path, dropped=True)
            raise CopyFailed(exc.errno, f"backup of {file_path} failed: {exc.strerror or exc}") from exc
        self.registry.commit(record)
        return GuardOutcome(GuardAction.BACKED_UP, file_path, record=record)

    def guard_open(self, event: FileOpenEvent, scope: ProtectedScope | None = None) -> GuardOutcome:
        """Suspend the opener, snapshot the file, resume the opener."""
        scope = scope or self.scope
        path, pid = event.path, event.pid
        if not scope.contains(path):
            return GuardOutcome(GuardAction.OUT_OF_SCOPE, path, pid=pid)
        if self.registry.is_backed_up(path):
            return GuardOutcome(GuardAction.ALREADY_BACKED_UP, path, pid=pid)
        ctl = self.control
        flags: set[str] = set()
        with ctl.pid_lock(pid):
            t0 = self.clock()
            try:
                suspended = ctl.suspend(pid)
            except SignalDenied:
                suspended = False
                flags.add("signal_denied")
            vanished = not suspended and "signal_denied" not in flags and ctl.live
            timer = None
            if suspended and self.suspend_timeout_s:
                def force_resume():
                    flags.add("suspend_timeout")
                    ctl.resume(pid)
                timer = threading.Timer(self.suspend_timeout_s, force_resume)
                timer.daemon = True
                timer.start()
            try:
                out = self.create_backup_file(path, scope)
            except (CopyFailed, NotARegularFile) as exc:
                action = GuardAction.COPY_FAILED
                if vanished and not os.path.exists(path):
                    action = GuardAction.PROCESS_VANISHED
                out = GuardOutcome(action, path, error=str(exc))
            finally:
                if timer is not None:
                    timer.cancel()
                if suspended and "suspend_timeout" not in flags:
                    ctl.resume(pid)
                t1 = self.clock()
        if vanished:
            flags.add("process_vanished")
        duration = max(t1 - t0, 1) if (suspended or "signal_denied" in flags) else 0
        return GuardOutcome(out.action, path, suspend_duration=duration,
                            flags=frozenset(flags | set(out.flags)), record=out.record, pid=pid,
                            error=out.error)

    # -- restore ------------------------------------------------------------

    def restore_if_malicious_and_terminated(self, file_path: str, is_malicious: bool) -> RestoreOutcome:
        rec = self.registry.get(file_path)
        if rec is None:
            raise NotRegistered(file_path)
        if not is_malicious or rec.status is not BackupStatus.CREATED:
            return RestoreOutcome(RestoreAction.UNCHANGED, file_path, self.clock())
        try:
            os.replace(rec.backup_path, file_path)
        except FileNotFoundError:
            raise BackupMissing(f"backup {rec.backup_path} is gone") from None
        except OSError as exc:
            raise RenameFailed(exc.errno, f"restore of {file_path} failed: {exc}") from exc
        ts = self.clock()
        self.registry.set_status(file_path, BackupStatus.RESTORED, ts)
        return RestoreOutcome(RestoreAction.RESTORED, file_path, ts)

    def restore_all(self, verdict=None) -> RestoreSummary:
        """Restore every live backup; per-entry failures are counted, never fatal."""
        if verdict is not None and getattr(verdict, "label", "malicious") != "malicious":
            raise ValueError("restore_all requires a malicious verdict")
        summary = RestoreSummary()
        for rec in self.registry.records(BackupStatus.CREATED):
            try:
                out = self.restore_if_malicious_and_terminated(rec.original_path, True)
            except BackupMissing as exc:
                summary.backup_missing += 1
                summary.errors.append(str(exc))
                continue
            except OSError as exc:
                summary.failed += 1
                summary.errors.append(str(exc))
                continue
            if out.action is RestoreAction.RESTORED:
                summary.restored += 1
                if summary.first_restore_at is None:
                    summary.first_restore_at = out.ts_ns
        return summary

    # -- shutdown -----------------------------------------------------------

    def finalize_shutdown(self, policy: ShutdownPolicy | str = ShutdownPolicy.REMOVE_BACKUPS) -> FinalizeSummary:
        policy = ShutdownPolicy(policy)
        summary = FinalizeSummary()
        with self._finalize_lock:
            if self._finalized:
                return summary
            self._finalized = True
        for rec in self.registry.records(BackupStatus.CREATED):
            try:
                if policy is ShutdownPolicy.RESTORE_MISSING_ORIGINALS and not os.path.lexists(rec.original_path):
                    os.rename(rec.backup_path, rec.original_path)
                    summary.renamed += 1
                else:
                    os.unlink(rec.backup_path)
                    summary.deleted += 1
            except OSError as exc:
                summary.errors.append(f"{rec.backup_path}: {exc}")
                continue
            self.registry.set_status(rec.original_path, BackupStatus.FINALIZED, self.clock())
        return summary

    @property
    def finalized(self) -> bool:
        return self._finalized
