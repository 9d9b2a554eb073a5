"""``driftgale`` command line: simulate, detect, experiment, gradcheck.

Exit codes: 0 success, 1 usage or input error, 2 a checked experiment failed.
``DRIFTGALE_SEED`` overrides the default seed of every subcommand.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .core import DetectorConfig, StreamFormatError, load_stream, write_stream
from .datagen import GeneratorSpec, generate
from .detector import fit, run_deployment
from .harness import (EXPERIMENTS, check_summary, default_spec, detector_config_from_dict,
                      load_experiment_spec, run_experiment)

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("DRIFTGALE_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DRIFTGALE_SEED must be an integer, got {raw!r}") from None


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON from {path}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="driftgale",
                description="Episode-level distribution-shift detection with a bounded "
                            "false-alarm rate.")
    p.add_argument("--version", action="version", version=f"driftgale {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic episode stream")
    s.add_argument("--spec", required=True,
                   help="JSON generator spec; may include 'count' (default 1000) and 'start'")
    s.add_argument("--out", required=True, help="output file (.jsonl or .csv)")
    s.add_argument("--count", type=int, help="number of episodes (overrides the spec)")
    s.add_argument("--seed", type=int, help="generator seed (overrides the spec)")
    s.add_argument("--format", choices=["jsonl", "csv"], help="defaults to the file extension")

    d = sub.add_parser("detect", help="fit a detector on one stream and monitor another")
    d.add_argument("--variant", required=True, choices=["ours", "cm", "cm-fv", "cm_fv"])
    d.add_argument("--train", required=True, help="training episodes (D_orig)")
    d.add_argument("--test", required=True, help="test episodes, in deployment order")
    d.add_argument("--threshold", type=float, default=100.0, help="alert threshold C")
    d.add_argument("--seed", type=int, help="detector seed (default: $DRIFTGALE_SEED or 0)")
    d.add_argument("--horizon", type=int, help="max test episodes to observe (default: all)")
    d.add_argument("--config", help="JSON detector config; flags override it")
    d.add_argument("--out-json", help="write the summary here instead of stdout")
    d.add_argument("--out-csv", help="write the per-step trace here")

    e = sub.add_parser("experiment", help="run a multi-trial experiment")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="JSON experiment spec")
    g.add_argument("--name", choices=EXPERIMENTS, help="use the built-in reference spec")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--jobs", type=int, default=1, help="worker threads")
    e.add_argument("--trials", type=int, help="override the number of trials")
    e.add_argument("--seed", type=int, help="override the master seed")
    e.add_argument("--check", action="store_true",
                   help="exit with status 2 if the reference acceptance condition fails")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the MLP gradients")
    gc.add_argument("--seed", type=int, help="master seed (default: $DRIFTGALE_SEED or 0)")
    gc.add_argument("--seeds", type=int, default=20, help="number of random networks")
    return p


def cmd_simulate(args) -> int:
    blob = _read_json(args.spec)
    count = args.count or int(blob.pop("count", 1000))
    blob.pop("count", None)
    start = int(blob.pop("start", 0))
    if args.seed is not None:
        blob["seed"] = args.seed
    elif "seed" not in blob:
        blob["seed"] = _default_seed()
    try:
        spec = GeneratorSpec.from_dict(blob)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator spec: {exc}") from None
    write_stream(generate(spec, count, start), args.out, args.format)
    print(f"wrote {count} episodes to {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = detector_config_from_dict(_read_json(args.config)) if args.config else DetectorConfig()
    seed = args.seed if args.seed is not None else _default_seed()
    config = replace(config, threshold_C=args.threshold, seed=seed)
    train = load_stream(args.train, label="train")
    test = load_stream(args.test, label="test")
    det = fit(args.variant, train, config)
    episodes = test.to_list()
    horizon = len(episodes) if args.horizon is None else args.horizon
    report = run_deployment(det, episodes, horizon)
    if args.out_json:
        Path(args.out_json).write_text(report.to_json() + "\n")
    else:
        print(report.to_json())
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = load_experiment_spec(args.spec) if args.spec else default_spec(args.name)
    seed = args.seed if args.seed is not None else (
        _default_seed() if "DRIFTGALE_SEED" in os.environ else spec.seed)
    spec = replace(spec, seed=seed, trials=args.trials or spec.trials)
    result = run_experiment(spec, out_dir=args.out_dir, jobs=args.jobs)
    ok, detail = check_summary(result.summary)
    print(f"{spec.name}: {'PASS' if ok else 'FAIL'} ({detail})")
    for name, path in sorted(result.artifacts.items()):
        print(f"  {name}: {path}")
    return EXIT_CHECK if args.check and not ok else EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    spec = replace(default_spec("gradcheck", trials=args.seeds), seed=seed)
    result = run_experiment(spec)
    ok, detail = check_summary(result.summary)
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} ({detail})")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"simulate": cmd_simulate, "detect": cmd_detect,
            "experiment": cmd_experiment, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, StreamFormatError, FileNotFoundError) as exc:
        print(f"driftgale {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"driftgale {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
