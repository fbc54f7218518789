# src/faceshield/cli.py
"""
faceshield command line.

    faceshield train-toy      --out DIR [--train N --val N --epochs E]
    faceshield protect-image  --in PNG --out PNG --detector WEIGHTS [--method M --eps E --iters T]
    faceshield protect-video  --in DIR --out DIR --detector WEIGHTS [--mode MODE --anchor-period P]
    faceshield eval           --pred JSON --gt JSON [--iou 0.5 --threshold 0.0 --out DIR]
    faceshield robustness     --protected DIR --clean DIR [--gt JSON] --detector WEIGHTS --out DIR
    faceshield transfer       --scenes N --source W [--source W ...] --target W [...] --out DIR
    faceshield replay         --manifest JSON [--out PATH]

Common flags: --config JSON, --seed INT, --verbose (replay takes only --verbose: the
manifest already holds the resolved config and its derived seeds).
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Any, Mapping, Sequence

from faceshield import pipeline
from faceshield.config import METHODS, MODES, RunConfig, build_run_config, read_config_file, run_config_from_manifest
from faceshield.errors import ConfigError, FaceShieldError
from faceshield.storage import read_json

logger = logging.getLogger("faceshield")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports a single diagnostic line instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file mirroring config.yaml sections")
    parser.add_argument("--seed", type=int, help="global seed (every random stream derives from it)")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faceshield", description="Protect faces from detector-driven DeepFake pipelines.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train-toy", help="train the built-in toy face detector")
    p.add_argument("--out", required=True, help="output directory for weights and report")
    p.add_argument("--train", type=int, help="training scene count")
    p.add_argument("--val", type=int, help="held-out scene count")
    p.add_argument("--epochs", type=int)
    _common(p)

    p = sub.add_parser("protect-image", help="protect one PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="protected PNG path")
    p.add_argument("--detector", help="toy detector weights")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--eps", type=float)
    p.add_argument("--iters", type=int)
    _common(p)

    p = sub.add_parser("protect-video", help="protect a directory of numbered PNG frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detector")
    p.add_argument("--method")
    p.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    p.add_argument("--anchor-period", type=int)
    _common(p)

    p = sub.add_parser("eval", help="F1 of a predictions file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--threshold", type=float, help="score threshold applied to predictions")
    p.add_argument("--out", default="data/processed/eval", help="directory for eval.json and the run manifest")
    _common(p)

    p = sub.add_parser("robustness", help="F1 of protected images under post-processing")
    p.add_argument("--protected", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--gt")
    p.add_argument("--detector")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("transfer", help="attack with source detectors, score on target detectors")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--source", action="append", required=True)
    p.add_argument("--target", action="append", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("replay", help="re-run a recorded run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write outputs here instead of the recorded path")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """CLI flags as config-section overrides; flags left unset do not override anything."""
    out: dict[str, dict[str, Any]] = {}

    def put(section: str, key: str, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    put("attack", "method", getattr(args, "method", None))
    put("attack", "epsilon", getattr(args, "eps", None))
    put("attack", "iterations", getattr(args, "iters", None))
    put("schedule", "mode", getattr(args, "mode", None))
    put("schedule", "anchor_period", getattr(args, "anchor_period", None))
    put("toy", "train_count", getattr(args, "train", None))
    put("toy", "val_count", getattr(args, "val", None))
    put("toy", "epochs", getattr(args, "epochs", None))
    put("eval", "iou_threshold", getattr(args, "iou", None))
    put("eval", "score_threshold", getattr(args, "threshold", None))
    put("detector", "weights", getattr(args, "detector", None))
    flat: dict[str, Any] = dict(out)
    if args.seed is not None:
        flat["seed"] = args.seed
    return flat


def _paths(args: argparse.Namespace, names: Sequence[str]) -> dict[str, Any]:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _fresh_config(args: argparse.Namespace) -> RunConfig:
    file_overrides = read_config_file(args.config) if args.config else None
    inputs = _paths(args, ("input", "pred", "gt", "protected", "clean", "detector", "source", "target", "scenes"))
    outputs = _paths(args, ("out",))
    return build_run_config(args.command, file_overrides, _flag_overrides(args), inputs, outputs)


def _replay_config(args: argparse.Namespace) -> RunConfig:
    run = run_config_from_manifest(read_json(args.manifest))
    if args.out:
        run = replace(run, outputs={**run.outputs, "out": args.out})
    logger.info("🔁 Replaying %s from %s", run.command, args.manifest)
    return run


def _need(paths: Mapping[str, Any], key: str, command: str):
    if paths.get(key) is None:
        raise ConfigError(f"{command} needs {key!r} but the run records none")
    return paths[key]


def _execute(run: RunConfig) -> None:
    cmd, inputs = run.command, run.inputs
    out = _need(run.outputs, "out", cmd)

    if cmd == "train-toy":
        report = pipeline.train_toy(run, out)
        print(f"clean_f1 = {report['clean_f1']:.4f}")
    elif cmd == "protect-image":
        pipeline.protect_image(run, _need(inputs, "input", cmd), out)
    elif cmd == "protect-video":
        pipeline.protect_video(run, _need(inputs, "input", cmd), out)
    elif cmd == "eval":
        stats = pipeline.eval_run(run, _need(inputs, "pred", cmd), _need(inputs, "gt", cmd), out)
        print(f"f1 = {stats['f1']:.4f}")
        print(json.dumps(stats, sort_keys=True))
    elif cmd == "robustness":
        table = pipeline.robustness_run(run, _need(inputs, "protected", cmd), _need(inputs, "clean", cmd),
                                        inputs.get("gt"), out)
        print(table[["transform", "setting", "f1", "status"]].to_string(index=False))
    elif cmd == "transfer":
        table = pipeline.transfer_run(run, int(_need(inputs, "scenes", cmd)), _need(inputs, "source", cmd),
                                      _need(inputs, "target", cmd), out)
        print(table.to_string(index=False))
    else:
        raise ConfigError(f"unknown command {cmd!r}")


def _run(args: argparse.Namespace) -> None:
    run = _replay_config(args) if args.command == "replay" else _fresh_config(args)
    _execute(run)


def dispatch(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        _run(args)
    except ConfigError as e:
        print(f"faceshield {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FaceShieldError as e:
        logger.error("❌ %s: %s", args.command, e)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("❌ %s failed: %s", args.command, e)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
