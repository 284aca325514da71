"""``python -m openguard.harness {emulate,benign} ...``: entry point for spawned workloads."""
import sys

from . import benign, emulator

USAGE = "usage: python -m openguard.harness {emulate,benign} [options]"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in ("emulate", "benign"):
        print(USAGE, file=sys.stderr)
        return 2
    entry = emulator.main if argv[0] == "emulate" else benign.main
    return entry(argv[1:])


if __name__ == "__main__":
    sys.exit(main())
