"""Command line interface: run experiments, replay results, sweep grids.

Exit codes: 0 success, 2 usage/config error, 3 hard-invariant violation
(including replay divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .spacetime import InvariantViolation
from .experiments import ConfigError, load_config, replay, run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVARIANT = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cplab",
        description="Contact-process percolation laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--replicas", type=int, default=None,
                        help="override the replica count")
        sp.add_argument("--out", default="results",
                        help="output directory (default: results)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker count (metrics identical for any value)")
        sp.add_argument("--trace", action="store_true",
                        help="emit per-replica NDJSON traces")

    run_p = sub.add_parser("run", help="run one experiment from a config")
    run_p.add_argument("config")
    common(run_p)

    sweep_p = sub.add_parser("sweep", help="run a parameter sweep config")
    sweep_p.add_argument("config")
    common(sweep_p)

    rep_p = sub.add_parser("replay", help="re-run a result and compare")
    rep_p.add_argument("result")
    rep_p.add_argument("--threads", type=int, default=None)
    return p


def _run_command(args, want_experiment=None) -> int:
    cfg = load_config(args.config)
    if want_experiment and cfg["experiment"] != want_experiment:
        raise ConfigError(
            f"'{want_experiment}' command needs experiment = "
            f"\"{want_experiment}\", config has {cfg['experiment']!r}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.replicas is not None:
        cfg["replicas"] = args.replicas
    try:
        path = run(cfg, args.out, threads=args.threads, trace=args.trace)
    except InvariantViolation as e:
        forensics = _write_forensics(args.out, cfg, e)
        print(f"invariant violation: {e}\nforensics: {forensics}",
              file=sys.stderr)
        return EXIT_INVARIANT
    print(path)
    return EXIT_OK


def _write_forensics(out_dir: str, cfg: dict, err: Exception) -> str:
    from .experiments import _atomic_write, config_hash
    payload = {"error": str(err), "error_type": type(err).__name__,
               "config": cfg, "config_hash": config_hash(cfg)}
    path = os.path.join(out_dir, "forensics.json")
    _atomic_write(path, json.dumps(payload, indent=1, sort_keys=True))
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run_command(args)
        if args.command == "sweep":
            return _run_command(args, want_experiment="sweep")
        if args.command == "replay":
            verdict = replay(args.result, threads=args.threads)
            print(json.dumps(verdict, indent=1))
            return EXIT_OK if verdict["match"] else EXIT_INVARIANT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
