from __future__ import annotations

import errno
import hashlib
import io
import os
import subprocess
import sys
import threading
import time

import psutil
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ev, wait_for
from openguard.backup import (BackupEngine, BackupRegistry, BackupStatus, GuardAction, Journal,
                              RestoreAction, ShutdownPolicy, sha256_file)
from openguard.backup import engine as engine_mod
from openguard.errors import (BackupMissing, CopyFailed, NotARegularFile, NotRegistered,
                              SignalDenied)
from openguard.events import ProtectedScope
from openguard.proc import DryRunControl


@pytest.fixture
def victim(tmp_path):
    d = tmp_path / "victim"
    d.mkdir()
    return d


def make(victim, name, data=b"original contents\n"):
    p = victim / name
    p.write_bytes(data)
    return str(p)


def engine_for(victim, **kw):
    kw.setdefault("control", DryRunControl())
    return BackupEngine(ProtectedScope.of(str(victim)), **kw)


# -- snapshot creation -------------------------------------------------------------

def test_create_backup_copies_bytes_and_registers(victim):
    p = make(victim, "report.pdf", b"\x00\x01pdf" * 1000)
    eng = engine_for(victim)
    out = eng.create_backup_file(p)
    assert out.action is GuardAction.BACKED_UP
    assert open(p + ".tmp", "rb").read() == open(p, "rb").read()
    rec = eng.registry.get(p)
    assert rec.backup_path == p + ".tmp" and rec.status is BackupStatus.CREATED
    assert rec.content_hash == hashlib.sha256(b"\x00\x01pdf" * 1000).hexdigest()
    assert not os.path.exists(p + ".tmp.partial")


def test_second_backup_is_a_no_op(victim):
    p = make(victim, "a.txt")
    eng = engine_for(victim)
    eng.create_backup_file(p)
    before = os.stat(p + ".tmp").st_mtime_ns
    with open(p, "wb") as fh:
        fh.write(b"changed")
    time.sleep(0.01)
    assert eng.create_backup_file(p).action is GuardAction.ALREADY_BACKED_UP
    assert os.stat(p + ".tmp").st_mtime_ns == before
    assert open(p + ".tmp", "rb").read() == b"original contents\n"


def test_out_of_scope_creates_nothing(tmp_path, victim):
    other = tmp_path / "other.txt"
    other.write_bytes(b"x")
    eng = engine_for(victim)
    assert eng.create_backup_file(str(other)).action is GuardAction.OUT_OF_SCOPE
    assert not os.path.exists(str(other) + ".tmp") and len(eng.registry) == 0


def test_zero_byte_file(victim):
    p = make(victim, "empty.doc", b"")
    eng = engine_for(victim)
    assert eng.create_backup_file(p).action is GuardAction.BACKED_UP
    assert os.path.getsize(p + ".tmp") == 0
    assert eng.registry.get(p).content_hash == hashlib.sha256(b"").hexdigest()


def test_oversized_file_is_skipped(victim):
    p = make(victim, "big.iso", b"x" * 100)
    eng = engine_for(victim, max_file_size=10)
    out = eng.create_backup_file(p)
    assert out.action is GuardAction.SKIPPED_TOO_LARGE and "too_large" in out.flags
    assert p not in eng.registry and not os.path.exists(p + ".tmp")


def test_directories_and_fifos_are_refused(victim):
    d = victim / "sub"
    d.mkdir()
    fifo = victim / "pipe"
    os.mkfifo(fifo)
    eng = engine_for(victim)
    for p in (str(d), str(fifo)):
        with pytest.raises(NotARegularFile):
            eng.create_backup_file(p)
        assert p not in eng.registry
    assert eng.guard_open(ev(str(fifo), 1)).action is GuardAction.COPY_FAILED


def test_io_error_mid_copy_removes_partial(victim, monkeypatch):
    p = make(victim, "a.xlsx", b"y" * 4096)
    real_open = open

    class FailingReader(io.BytesIO):
        def read(self, *_):
            raise OSError(errno.EIO, "Input/output error")

    def fake_open(path, mode="r", *a, **kw):
        if path == p and "r" in mode:
            return FailingReader()
        return real_open(path, mode, *a, **kw)

    monkeypatch.setattr(engine_mod, "open", fake_open, raising=False)
    eng = engine_for(victim)
    with pytest.raises(CopyFailed):
        eng.create_backup_file(p)
    assert not os.path.exists(p + ".tmp.partial") and not os.path.exists(p + ".tmp")
    assert eng.registry.drop_count == 1 and p not in eng.registry
    monkeypatch.undo()
    # a later attempt is allowed once the fault clears
    assert eng.create_backup_file(p).action is GuardAction.BACKED_UP


def test_concurrent_requests_for_one_path_copy_once(victim):
    p = make(victim, "shared.db", os.urandom(1 << 16))
    eng = engine_for(victim, copy_delay_s=0.05)
    outcomes = []
    threads = [threading.Thread(target=lambda: outcomes.append(eng.create_backup_file(p).action))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count(GuardAction.BACKED_UP) == 1
    assert outcomes.count(GuardAction.ALREADY_BACKED_UP) == 7
    assert sha256_file(p + ".tmp") == sha256_file(p)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=25), st.sampled_from([".tmp", ".bak", ".snap"]))
def test_backups_are_idempotent_and_follow_the_suffix(tmp_path_factory, picks, suffix):
    root = tmp_path_factory.mktemp("idem")
    paths = [make(root, f"f{i}.txt", bytes([i]) * (i + 1)) for i in range(6)]
    eng = BackupEngine(ProtectedScope.of(str(root)), suffix=suffix, control=DryRunControl())
    created = [eng.create_backup_file(paths[i]).action for i in picks]
    assert created.count(GuardAction.BACKED_UP) == len(set(picks))
    assert set(eng.registry) == {paths[i] for i in set(picks)}
    for path in eng.registry:
        rec = eng.registry.get(path)
        assert rec.backup_path == path + suffix
        assert sha256_file(rec.backup_path) == rec.content_hash == sha256_file(path)
    leftovers = sorted(n for n in os.listdir(root) if n.endswith(suffix))
    assert len(leftovers) == len(set(picks))


# -- guarded open ------------------------------------------------------------------

def test_guard_suspends_then_resumes_once(victim):
    p = make(victim, "a.txt")
    ctl = DryRunControl()
    eng = engine_for(victim, control=ctl)
    out = eng.guard_open(ev(p, 1, pid=4242))
    assert out.action is GuardAction.BACKED_UP and out.suspend_duration > 0
    assert ctl.calls == [("suspend", 4242), ("resume", 4242)]
    again = eng.guard_open(ev(p, 2, pid=4242))
    assert again.action is GuardAction.ALREADY_BACKED_UP and again.suspend_duration == 0
    assert len(ctl.calls) == 2


def test_guard_out_of_scope_never_signals(tmp_path, victim):
    ctl = DryRunControl()
    eng = engine_for(victim, control=ctl)
    out = eng.guard_open(ev(str(tmp_path / "x"), 1))
    assert out.action is GuardAction.OUT_OF_SCOPE and ctl.calls == []


WRITER = """
import sys
path = sys.argv[1]
fh = open(path, "r+b")
sys.stdout.write("ready\\n"); sys.stdout.flush()
sys.stdin.readline()
fh.seek(0); fh.write(b"ENCRYPTED!" * 4); fh.truncate(); fh.close()
"""


def test_suspended_writer_cannot_touch_the_file_mid_copy(victim):
    original = os.urandom(1 << 20)
    p = make(victim, "thesis.docx", original)
    writer = subprocess.Popen([sys.executable, "-c", WRITER, p], stdin=subprocess.PIPE,
                              stdout=subprocess.PIPE, text=True)
    assert writer.stdout.readline() == "ready\n"
    eng = BackupEngine(ProtectedScope.of(str(victim)), copy_delay_s=0.3)
    result = {}
    t = threading.Thread(target=lambda: result.update(out=eng.guard_open(ev(p, 1, pid=writer.pid))))
    t.start()
    assert wait_for(lambda: psutil.Process(writer.pid).status() == psutil.STATUS_STOPPED, 2)
    writer.stdin.write("go\n")
    writer.stdin.flush()
    t.join()
    assert writer.wait(5) == 0
    out = result["out"]
    assert out.action is GuardAction.BACKED_UP and out.flags == frozenset()
    assert open(p + ".tmp", "rb").read() == original
    assert open(p, "rb").read() == b"ENCRYPTED!" * 4


def test_opener_that_already_exited_is_flagged(victim):
    p = make(victim, "a.txt")
    child = subprocess.Popen([sys.executable, "-c", "pass"])
    child.wait()
    eng = BackupEngine(ProtectedScope.of(str(victim)))
    out = eng.guard_open(ev(p, 1, pid=child.pid))
    assert out.action is GuardAction.BACKED_UP
    assert "process_vanished" in out.flags and out.suspend_duration == 0


def test_signal_denied_still_snapshots(victim):
    class Denying(DryRunControl):
        live = True

        def suspend(self, pid):
            raise SignalDenied(f"pid {pid}")

    p = make(victim, "a.txt")
    ctl = Denying()
    out = engine_for(victim, control=ctl).guard_open(ev(p, 1))
    assert out.action is GuardAction.BACKED_UP
    assert out.flags == frozenset({"signal_denied"})
    assert ("resume", 100) not in ctl.calls


def test_long_copy_is_resumed_by_the_timeout(victim):
    p = make(victim, "a.txt")
    sleeper = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(30)"])
    try:
        eng = BackupEngine(ProtectedScope.of(str(victim)), suspend_timeout_s=0.05,
                           copy_delay_s=0.3)
        t = threading.Thread(target=lambda: out.append(eng.guard_open(ev(p, 1, pid=sleeper.pid))))
        out = []
        t.start()
        # the opener runs again before the snapshot finishes
        time.sleep(0.15)
        assert psutil.Process(sleeper.pid).status() != psutil.STATUS_STOPPED
        t.join()
        assert out[0].action is GuardAction.BACKED_UP and "suspend_timeout" in out[0].flags
    finally:
        sleeper.kill()
        sleeper.wait()


# -- restore -------------------------------------------------------------------------

def test_restore_replaces_the_damaged_original(victim):
    p = make(victim, "a.txt")
    eng = engine_for(victim)
    eng.create_backup_file(p)
    with open(p, "wb") as fh:
        fh.write(b"garbage")
    out = eng.restore_if_malicious_and_terminated(p, True)
    assert out.action is RestoreAction.RESTORED
    assert open(p, "rb").read() == b"original contents\n"
    assert not os.path.exists(p + ".tmp")
    assert eng.registry.get(p).status is BackupStatus.RESTORED
    assert eng.restore_if_malicious_and_terminated(p, True).action is RestoreAction.UNCHANGED


def test_benign_verdict_leaves_everything(victim):
    p = make(victim, "a.txt")
    eng = engine_for(victim)
    eng.create_backup_file(p)
    assert eng.restore_if_malicious_and_terminated(p, False).action is RestoreAction.UNCHANGED
    assert os.path.exists(p + ".tmp")


def test_restore_errors(victim):
    p = make(victim, "a.txt")
    eng = engine_for(victim)
    with pytest.raises(NotRegistered):
        eng.restore_if_malicious_and_terminated(p, True)
    eng.create_backup_file(p)
    os.unlink(p + ".tmp")
    with pytest.raises(BackupMissing):
        eng.restore_if_malicious_and_terminated(p, True)


@pytest.mark.parametrize("n, missing", [(5, 0), (5, 1), (0, 0)])
def test_restore_all_counts_each_entry(victim, n, missing):
    eng = engine_for(victim)
    paths = [make(victim, f"f{i}.txt", f"data {i}".encode()) for i in range(n)]
    for p in paths:
        eng.create_backup_file(p)
        with open(p, "wb") as fh:
            fh.write(b"locked")
    for p in paths[:missing]:
        os.unlink(p + ".tmp")
    summary = eng.restore_all()
    assert (summary.restored, summary.backup_missing, summary.failed) == (n - missing, missing, 0)
    assert (summary.first_restore_at is None) == (n - missing == 0)
    for i, p in enumerate(paths[missing:], start=missing):
        assert open(p, "rb").read() == f"data {i}".encode()


# -- shutdown and journal --------------------------------------------------------------

def test_finalize_removes_backups_exactly_once(victim):
    eng = engine_for(victim)
    paths = [make(victim, f"f{i}", b"z") for i in range(3)]
    for p in paths:
        eng.create_backup_file(p)
    first = eng.finalize_shutdown()
    assert first.deleted == 3 and eng.finalized
    assert not any(os.path.exists(p + ".tmp") for p in paths)
    second = eng.finalize_shutdown()
    assert (second.deleted, second.renamed) == (0, 0)


def test_finalize_can_bring_back_deleted_originals(victim):
    eng = engine_for(victim)
    kept, gone = make(victim, "kept"), make(victim, "gone")
    eng.create_backup_file(kept)
    eng.create_backup_file(gone)
    os.unlink(gone)
    s = eng.finalize_shutdown(ShutdownPolicy.RESTORE_MISSING_ORIGINALS)
    assert (s.deleted, s.renamed) == (1, 1)
    assert open(gone, "rb").read() == b"original contents\n"
    assert not os.path.exists(kept + ".tmp")


def test_journal_rebuilds_the_registry(victim, tmp_path):
    jpath = str(tmp_path / "journal.jsonl")
    a, b = make(victim, "a"), make(victim, "b")
    eng = engine_for(victim, journal_path=jpath)
    eng.create_backup_file(a)
    eng.create_backup_file(b)
    eng.restore_if_malicious_and_terminated(a, True)
    reg = BackupRegistry(Journal(jpath))
    assert set(reg) == {a, b}
    assert reg.get(a).status is BackupStatus.RESTORED
    assert reg.get(b).status is BackupStatus.CREATED
    assert reg.get(b).content_hash == eng.registry.get(b).content_hash
    assert reg.is_backed_up(b) and not reg.is_backed_up(a)
