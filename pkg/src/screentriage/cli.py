"""Command line surface.

One subcommand per pipeline stage plus `all`. Flags override the config
file, which overrides built-in defaults. Exit codes: 0 success, 1 unexpected
failure, 2 bad configuration, 3 missing prerequisite artifact, 4 triage fell
back to the trivial policy and --strict was given.
"""

import argparse
import json
import sys

from .config import ConfigError, load_config
from .pipeline import (
    STAGES,
    MissingArtifact,
    RunPaths,
    output_lock,
    run_all,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INFEASIBLE = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="screentriage",
        description="Generate a synthetic screening cohort, train the two-stage "
        "reader-plus-machine system, and emit evaluation reports.",
    )
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--threads", type=int, help="worker thread override")
    p.add_argument("--delta", type=float, help="triage penalty grid step override")
    p.add_argument("--b-max", type=float, dest="b_max", help="triage penalty grid upper bound override")
    p.add_argument(
        "--strict",
        action="store_true",
        help="exit 4 when the triage search falls back to the trivial policy",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, _ in STAGES:
        sub.add_parser(name, help=f"run the {name} stage")
    sub.add_parser("all", help="run every stage in order")
    return p


_FLAG_TO_KEY = {
    "seed": "seed",
    "out": "out",
    "threads": "threads",
    "delta": "triage_delta",
    "b_max": "triage_b_max",
}


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG

    stage_fns = dict(STAGES)
    try:
        with output_lock(RunPaths(cfg.out)):
            if args.command == "all":
                result = run_all(cfg)
            else:
                result = stage_fns[args.command](cfg)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"error: missing-artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: run: {e}", file=sys.stderr)
        return EXIT_ERROR

    print(json.dumps({"command": args.command, "out": cfg.out, "result": result}, sort_keys=True))

    infeasible = _went_infeasible(args.command, result)
    if infeasible:
        print(
            "warning: infeasible-triage: no grid cell met the validation error caps; "
            "emitted the trivial all-radiologist policy",
            file=sys.stderr,
        )
        if args.strict:
            return EXIT_INFEASIBLE
    return EXIT_OK


def _went_infeasible(command: str, result: dict) -> bool:
    if command == "train-triage":
        return result.get("feasible") is False
    if command == "all":
        return result.get("train-triage", {}).get("feasible") is False
    return False


if __name__ == "__main__":
    sys.exit(main())
