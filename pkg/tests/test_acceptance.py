"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Live criteria share session-scoped experiment runs, so criterion 5 reads the
log of criterion 4's run and criterion 7 inspects every incident from the
live runs.
"""
from __future__ import annotations

import os
import random
import string
import time
from dataclasses import dataclass, field
from statistics import mean

import pytest

from acceptance_results import RESULTS
from helpers import needs_fanotify
from openguard.backup import sha256_file
from openguard.detection.features import STRIDE_NS
from openguard.events import PathFragmentBatch, reconstruct_path
from openguard.experiment import ExperimentConfig, run_experiment
from openguard.harness import EmulationLog, generate_victim_corpus, spawn_benign
from openguard.harness.corpus import manifest_path_for
from openguard.metrics import backup_ratio, render_report
from openguard.orchestrator import Daemon, Mode, RunConfig
from openguard.proc import pid_alive
from table_cells import CELLS

MS = 1_000_000
JITTER_NS = 50 * MS


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- live experiment plumbing ---------------------------------------------------------

@dataclass
class TrialCapture:
    """State observed at the end of a live trial, before backups are finalized."""

    incidents: list = field(default_factory=list)
    gaps: list[int] = field(default_factory=list)
    registered: int = 0
    restored_mismatch: list[str] = field(default_factory=list)
    emulator_pids_alive: list[int] = field(default_factory=list)
    workdir: str = ""


def live_experiment(workdir, mode, profile, trials, seed, copy_delay=0.0, corpus_size=200):
    cfg = ExperimentConfig(run=RunConfig(mode=mode, copy_delay_s=copy_delay), profile=profile,
                           corpus_size=corpus_size, seed=seed, workdir=str(workdir),
                           source="live", timeout_s=120)
    captures: list[TrialCapture] = []

    def capture(daemon, manifest):
        c = TrialCapture(workdir=os.path.dirname(manifest.root))
        c.incidents = list(daemon.report.incidents)
        c.gaps = daemon.detector.update_gaps()
        for rec in daemon.engine.registry.records():
            expected = manifest.digest_of(rec.original_path)
            if expected is None:
                continue  # a name the encryptor had already given the file
            c.registered += 1
            p = rec.original_path
            if not os.path.exists(p) or sha256_file(p) != expected:
                c.restored_mismatch.append(p)
        log = EmulationLog.load(os.path.join(c.workdir, "emulator.jsonl"))
        c.emulator_pids_alive = [p for p in log.pids if pid_alive(p)]
        captures.append(c)

    reports = run_experiment(cfg, trials, on_trial_end=capture)
    return reports, captures


def write_set_tmp(capture: TrialCapture) -> list[str]:
    log = EmulationLog.load(os.path.join(capture.workdir, "emulator.jsonl"))
    return [p for p in log.write_set if p.endswith(".tmp")]


@pytest.fixture(scope="session")
def medium_run(tmp_path_factory):
    t0 = time.monotonic()
    reports, caps = live_experiment(tmp_path_factory.mktemp("c4"), Mode.ASYNC, "medium", 1,
                                    seed=4)
    return reports[0], caps[0], time.monotonic() - t0


@pytest.fixture(scope="session")
def fast_run(tmp_path_factory):
    t0 = time.monotonic()
    reports, caps = live_experiment(tmp_path_factory.mktemp("c9"), Mode.ASYNC, "fast", 1,
                                    seed=9)
    return reports[0], caps[0], time.monotonic() - t0


@pytest.fixture(scope="session")
def architecture_runs(tmp_path_factory):
    t0 = time.monotonic()
    out = {}
    for mode in (Mode.SYNC, Mode.ASYNC):
        out[mode] = live_experiment(tmp_path_factory.mktemp(f"c6-{mode.value}"), mode, "fast",
                                    5, seed=60, copy_delay=0.05)
    # a second delay level, to show which architecture's update cadence depends on it
    for mode in (Mode.SYNC, Mode.ASYNC):
        out[(mode, "large")] = live_experiment(tmp_path_factory.mktemp(f"c6b-{mode.value}"),
                                               mode, "fast", 1, seed=60, copy_delay=0.2,
                                               corpus_size=100)
    return out, time.monotonic() - t0


def replay_once(workdir):
    cfg = ExperimentConfig(run=RunConfig(mode=Mode.ASYNC), corpus_size=200, seed=3,
                           workdir=str(workdir), source="replay", replay_repeats=3)
    seen = {}

    def inspect(daemon, manifest):
        tmp_files = [os.path.join(d, f) for d, _, fs in os.walk(manifest.root)
                     for f in fs if f.endswith(".tmp")]
        bad = [p for p in tmp_files if sha256_file(p) != manifest.digest_of(p[:-len(".tmp")])]
        seen.update(tmp=len(tmp_files), bad=bad, events=daemon.report.events_seen)

    reports = run_experiment(cfg, 1, on_trial_end=inspect)
    return reports, seen


# -- criteria ---------------------------------------------------------------------------

def test_criterion_01_ratio_fixture():
    t0 = time.monotonic()
    wrong = []
    for arch, model, family, trial, b, e, expected in CELLS:
        r = backup_ratio(b, e)
        if expected is None:
            ok = r.vacuous and float(r) == 100.0
        else:
            ok = not r.vacuous and abs(float(r) - expected) <= 0.01
        if not ok:
            wrong.append(f"{arch}/{model}/{family}/{trial}: {float(r)} != {expected}")
    elapsed = time.monotonic() - t0
    record(1, not wrong and len(CELLS) == 24 and elapsed < 1,
           f"{len(CELLS) - len(wrong)}/24 cells within 0.01 in {elapsed:.3f}s" +
           (f"; {wrong}" if wrong else ""))


def test_criterion_02_path_reconstruction():
    t0 = time.monotonic()
    rng = random.Random(2)
    alphabet = string.ascii_letters + string.digits + "._-~ +"
    mismatches = 0
    for _ in range(1000):
        parts = []
        for _ in range(rng.randint(1, 12)):
            name = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 16)))
            parts.append(name if name not in (".", "..") else name + "_")
        path = "/" + "/".join(parts)
        if reconstruct_path(PathFragmentBatch(1, 0, tuple(reversed(parts)))) != path:
            mismatches += 1
    elapsed = time.monotonic() - t0
    record(2, mismatches == 0 and elapsed < 1,
           f"1000 paths, {mismatches} mismatches, {elapsed:.3f}s")


def test_criterion_03_backup_fidelity(tmp_path):
    t0 = time.monotonic()
    reports, seen = replay_once(tmp_path)
    elapsed = time.monotonic() - t0
    r = reports[0]
    ok = (r.failure is None and seen["events"] == 600 and seen["tmp"] == 200
          and not seen["bad"] and r.backup_files == 200 and elapsed < 30)
    record(3, ok, f"{seen['events']} opens, {seen['tmp']} .tmp files, "
                  f"{len(seen['bad'])} digest mismatches, {elapsed:.1f}s")


@needs_fanotify
def test_criterion_04_restore_round_trip(medium_run):
    r, cap, elapsed = medium_run
    ok = (r.failure is None and r.incidents >= 1 and cap.registered > 0
          and not cap.restored_mismatch and r.protected_fraction == 100.0
          and not cap.emulator_pids_alive and elapsed < 60)
    record(4, ok, f"E={r.encrypted_files} B={r.backup_files} incidents={r.incidents} "
                  f"registered originals={cap.registered} mismatched={len(cap.restored_mismatch)} "
                  f"protected={r.protected_fraction:.2f}% emulator alive="
                  f"{cap.emulator_pids_alive} {elapsed:.1f}s" +
           (f" failure={r.failure}" if r.failure else ""))


@needs_fanotify
def test_criterion_05_skip_list(medium_run, fast_run):
    offenders = write_set_tmp(medium_run[1]) + write_set_tmp(fast_run[1])
    record(5, not offenders, f"{len(offenders)} .tmp paths in the emulator write sets")


@needs_fanotify
def test_criterion_06_architecture_direction(architecture_runs):
    runs, elapsed = architecture_runs
    det = {}
    missing = []
    for mode in (Mode.SYNC, Mode.ASYNC):
        reports, _ = runs[mode]
        times = [r.timings.detection_time for r in reports if r.timings is not None]
        if len(times) != len(reports):
            missing.append(f"{mode.value}: {len(reports) - len(times)} trials without detection")
        missing += [f"{mode.value} trial {r.trial}: {r.failure}" for r in reports if r.failure]
        det[mode] = mean(times) if times else float("inf")

    def max_gap(key):
        return max((g for c in runs[key][1] for g in c.gaps), default=0)

    bound = STRIDE_NS + JITTER_NS
    a_small, a_large = max_gap(Mode.ASYNC), max_gap((Mode.ASYNC, "large"))
    s_small, s_large = max_gap(Mode.SYNC), max_gap((Mode.SYNC, "large"))
    ok = (not missing and det[Mode.ASYNC] < det[Mode.SYNC]
          and a_small <= bound and a_large <= bound
          and s_large > s_small and s_large > bound and elapsed < 300)
    record(6, ok,
           f"mean detection sync={det[Mode.SYNC] / 1e9:.3f}s async={det[Mode.ASYNC] / 1e9:.3f}s; "
           f"max update gap async={a_small / 1e6:.0f}/{a_large / 1e6:.0f}ms "
           f"sync={s_small / 1e6:.0f}/{s_large / 1e6:.0f}ms at 50/200ms delay "
           f"(bound {bound / 1e6:.0f}ms); {elapsed:.0f}s" + (f"; {missing}" if missing else ""))


@needs_fanotify
def test_criterion_07_timing_identity(medium_run, fast_run, architecture_runs):
    runs, _ = architecture_runs
    caps = [medium_run[1], fast_run[1]] + [c for key in runs for c in runs[key][1]]
    incidents = [inc for c in caps for inc in c.incidents]
    bad = []
    ordered = 0
    for inc in incidents:
        t = inc.timings
        if t is None:
            bad.append(f"pid {inc.verdict.pid}: no timings ({inc.critical})")
            continue
        if t.detection_time != t.response_time + t.kill_time:
            bad.append(f"pid {inc.verdict.pid}: {t.to_dict()}")
        # an incident for a worker whose files were already restored by an
        # earlier incident restores nothing; the ordering is then vacuous
        first = getattr(inc.restore, "first_restore_at", None)
        if first is not None:
            ordered += 1
            if not t.killed_at < first:
                bad.append(f"pid {inc.verdict.pid}: killed_at {t.killed_at} >= restore {first}")
    record(7, bool(incidents) and ordered > 0 and not bad,
           f"{len(incidents)} incidents checked, {ordered} with restores, {len(bad)} violations" +
           (f"; {bad[:3]}" if bad else ""))


@needs_fanotify
def test_criterion_08_benign_workload(tmp_path):
    m = generate_victim_corpus(tmp_path / "victim", 200, seed=8)
    cfg = RunConfig(mode=Mode.ASYNC, scope=[m.root])
    daemon = Daemon(cfg).start()
    try:
        proc = spawn_benign(manifest_path_for(m.root), 2.0, 60.0, str(tmp_path / "benign.jsonl"),
                            seed=8)
        proc.wait(timeout=90)
        daemon.wait_idle(0.5, timeout=10)
        latched = dict(daemon.detector.latched)
    finally:
        rep = daemon.stop()
    changed = m.changed()
    opens = len((tmp_path / "benign.jsonl").read_text().splitlines())
    ok = (proc.returncode == 0 and not latched and not rep.incidents and not changed
          and rep.events_seen >= 100)
    record(8, ok, f"{opens} benign opens, {rep.events_seen} events seen, "
                  f"{len(latched)} malicious verdicts, {len(rep.incidents)} kills, "
                  f"{len(changed)} changed files")


@needs_fanotify
def test_criterion_09_fast_adversary(fast_run):
    r, cap, elapsed = fast_run
    ok = (r.failure is None and 0 < r.protected_fraction < 100 and not r.restore_mismatches
          and elapsed < 60)
    record(9, ok, f"E={r.encrypted_files} B={r.backup_files} protected="
                  f"{r.protected_fraction:.2f}% restore mismatches={len(r.restore_mismatches)} "
                  f"kill tree={r.kill_tree_size} {elapsed:.1f}s" +
           (f" failure={r.failure}" if r.failure else ""))


def test_criterion_10_determinism(tmp_path):
    t0 = time.monotonic()
    first = render_report(replay_once(tmp_path / "a")[0])[1]
    second = render_report(replay_once(tmp_path / "b")[0])[1]
    elapsed = time.monotonic() - t0
    record(10, first == second and elapsed < 60,
           f"machine reports identical={first == second} ({len(first)} bytes), {elapsed:.1f}s")
