"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 trial failure, 4 an
acceptance threshold (``--min-protected``) was violated.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from .errors import ConfigError, OpenGuardError
from .events import ProtectedScope, dumps_event, replay_trace

EXIT_OK, EXIT_CONFIG, EXIT_TRIAL, EXIT_THRESHOLD = 0, 2, 3, 4
GLOBAL_DEFAULTS = {"config": None, "mode": None, "scope": None, "seed": 0, "json": False,
                   "verbose": False}


def _run_config(args, **extra):
    from .orchestrator import RunConfig
    overrides = dict(mode=args.mode, scope=args.scope or None, **extra)
    return RunConfig.load(args.config, **overrides)


def cmd_daemon_run(args) -> int:
    from .orchestrator import Daemon
    cfg = _run_config(args, source_kind=args.source, trace_file=args.trace,
                      copy_delay_s=args.copy_delay, incident_log=args.incident_log,
                      fanout_socket=args.socket, stop_after_incident=args.stop_after_incident or None)
    if not cfg.scope.directories:
        raise ConfigError("no protected directories: pass --scope or set OPENGUARD_SCOPE")
    daemon = Daemon(cfg).start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.is_set() and not daemon.wait(0.2):
        pass
    report = daemon.stop()
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(f"{report.mode}: {report.events_seen} events, {report.backups_made} backups, "
              f"{len(report.incidents)} incidents, {report.drops} dropped")
        for line in report.critical:
            print(f"CRITICAL: {line}", file=sys.stderr)
    return EXIT_TRIAL if report.critical else EXIT_OK


def cmd_corpus_generate(args) -> int:
    from .harness import generate_victim_corpus, manifest_path_for
    m = generate_victim_corpus(args.root, args.count, args.seed)
    out = {"root": m.root, "files": len(m.entries), "manifest": manifest_path_for(m.root)}
    print(json.dumps(out) if args.json else f"{out['files']} files under {out['root']}, "
          f"manifest {out['manifest']}")
    return EXIT_OK


def cmd_emulate(args) -> int:
    from .harness import CorpusManifest, emulate, get_profile
    from .harness.benign import run_benign_workload
    manifest = CorpusManifest.load(args.manifest)
    if args.benign:
        run_benign_workload(manifest, args.rate, args.duration, args.log, args.seed)
        return EXIT_OK
    overrides = {"seed": args.seed} if args.seed else {}
    profile = get_profile(args.profile, **overrides)
    key = bytes.fromhex(args.key) if args.key else None
    return emulate(manifest, profile, args.log, key)


def cmd_experiment_run(args) -> int:
    from .experiment import ExperimentConfig, run_experiment
    from .metrics import render_report
    run_cfg = _run_config(args, copy_delay_s=args.copy_delay,
                          classifier=json.loads(args.classifier) if args.classifier else None)
    cfg = ExperimentConfig(run=run_cfg, profile=args.profile, corpus_size=args.corpus_size,
                           seed=args.seed, workdir=args.workdir, source=args.source,
                           timeout_s=args.timeout)
    reports = run_experiment(cfg, args.trials)
    table, machine = render_report(reports, args.out)
    sys.stdout.write(machine if args.json else table)
    if any(r.failure for r in reports):
        return EXIT_TRIAL
    if args.min_protected is not None and any(r.protected_fraction < args.min_protected
                                              for r in reports):
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_report_render(args) -> int:
    from .metrics import load_reports, render_report
    table, machine = render_report(load_reports(args.file))
    sys.stdout.write(machine if args.json else table)
    return EXIT_OK


def cmd_trace_replay(args) -> int:
    scope = ProtectedScope.of(*args.scope) if args.scope else None
    n = 0
    for ev in replay_trace(args.file):
        if scope is not None and not scope.contains(ev.path):
            continue
        n += 1
        print(dumps_event(ev) if args.json else
              f"{ev.timestamp:>20} {ev.pid:>7} {ev.comm:<16} {ev.path}")
    if not args.json:
        print(f"{n} events", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # a subparser from overwriting a value given earlier with its default
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--mode", choices=["rofbs_sync", "rofbs_alpha_async"])
    common.add_argument("--scope", action="append", metavar="DIR",
                        help="protected directory (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="openguard", parents=[common],
                                 description="Open-file backup and behavioural detection daemon")
    sub = ap.add_subparsers(dest="group", required=True)

    daemon = sub.add_parser("daemon").add_subparsers(dest="action", required=True)
    p = daemon.add_parser("run", parents=[common], help="guard the scope until interrupted")
    p.add_argument("--source", choices=["kernel_probe", "fs_notify", "trace_replay"])
    p.add_argument("--trace", help="trace file for --source trace_replay")
    p.add_argument("--copy-delay", type=float)
    p.add_argument("--incident-log")
    p.add_argument("--socket", help="publish events on this local socket")
    p.add_argument("--stop-after-incident", action="store_true")
    p.set_defaults(func=cmd_daemon_run)

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", required=True)
    p = corpus.add_parser("generate", parents=[common])
    p.add_argument("--root", required=True)
    p.add_argument("--count", type=int, default=200)
    p.set_defaults(func=cmd_corpus_generate)

    p = sub.add_parser("emulate", parents=[common], help="run the encryptor (or benign reader)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--profile", default="medium", help="slow, medium, fast or a JSON file")
    p.add_argument("--log", required=True)
    p.add_argument("--key", help="hex key")
    p.add_argument("--benign", action="store_true", help="read-only workload instead")
    p.add_argument("--rate", type=float, default=2.0)
    p.add_argument("--duration", type=float, default=60.0)
    p.set_defaults(func=cmd_emulate)

    exp = sub.add_parser("experiment").add_subparsers(dest="action", required=True)
    p = exp.add_parser("run", parents=[common])
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--profile", default="medium")
    p.add_argument("--corpus-size", type=int, default=200)
    p.add_argument("--source", choices=["live", "replay"], default="live")
    p.add_argument("--workdir", default="openguard-runs")
    p.add_argument("--copy-delay", type=float)
    p.add_argument("--classifier", help="inline JSON model document")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--out", help="write the machine report here")
    p.add_argument("--min-protected", type=float, help="exit 4 if any trial protects less")
    p.set_defaults(func=cmd_experiment_run)

    rep = sub.add_parser("report").add_subparsers(dest="action", required=True)
    p = rep.add_parser("render", parents=[common])
    p.add_argument("file")
    p.set_defaults(func=cmd_report_render)

    tr = sub.add_parser("trace").add_subparsers(dest="action", required=True)
    p = tr.add_parser("replay", parents=[common])
    p.add_argument("file")
    p.set_defaults(func=cmd_trace_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OpenGuardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRIAL


if __name__ == "__main__":
    sys.exit(main())
