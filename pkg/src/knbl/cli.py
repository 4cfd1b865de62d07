"""Command-line entry point.

Subcommands: check-operator, solve-linear, solve-farfield, solve-nonlinear,
d-study, mms.  Each reads a flat key-value config (all keys optional), applies
``--set key=value`` overrides, writes a deterministic output tree under the
configured directory (the KNBL_OUT env var relocates relative paths), and
exits 0 on pass.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import ConfigError, load_config

_COMMANDS = {
    "check-operator": harness.run_check_operator,
    "solve-linear": harness.run_solve_linear,
    "solve-farfield": harness.run_solve_farfield,
    "solve-nonlinear": harness.run_solve_nonlinear,
    "d-study": harness.run_d_study,
    "mms": harness.run_mms,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="knbl",
        description="Steady kinetic boundary-layer solver (truncated slab, "
                    "diffuse wall, far-field correction)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    try:
        code = _COMMANDS[args.command](cfg)
    except Exception as e:  # structured failure report, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    print(f"{args.command}: {'pass' if code == 0 else 'FAIL'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
