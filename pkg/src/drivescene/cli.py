"""``drivescene`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Sequence

from .errors import (
    AlignmentError,
    ConfigError,
    DriveSceneError,
    LabelParseError,
    ManifestError,
    StageError,
)
from .pipeline import ENDPOINT_ENV, RUNNERS, Run, load_config

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
INPUT_ERRORS = (ConfigError, ManifestError, LabelParseError, AlignmentError, FileNotFoundError, json.JSONDecodeError)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="root directory for run outputs")
    p.add_argument("--endpoint", help=f"inference endpoint (overrides ${ENDPOINT_ENV})")
    p.add_argument("--workers", type=int, help="worker pool / in-flight request limit")
    p.add_argument("--model", help="model id sent to the inference service")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drivescene", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="temporal vote, motion consistency and fusion of label streams")
    _common(p)
    p.add_argument("--frames", dest="paths.frames")
    p.add_argument("--vlm-labels", dest="paths.vlm_labels")
    p.add_argument("--expert-labels", dest="paths.expert_labels")
    p.add_argument("--library", dest="paths.library")
    p.add_argument("--simulate", type=int, metavar="N", help="mine a synthetic corrupted drive of N frames")
    p.add_argument("--corruption", type=float, default=None)

    p = sub.add_parser("synthesize", help="procedural scene specs with ground-truth labels")
    _common(p)
    p.add_argument("--count", dest="synth.count", type=int)
    p.add_argument("--pairs", dest="paths.pairs", help="filter an image/caption pair JSONL instead")

    p = sub.add_parser("prompt-opt", help="hill-climb the prompt library against the eval Average")
    _common(p)
    p.add_argument("--eval-set", dest="paths.eval_set")
    p.add_argument("--library", dest="paths.library")
    p.add_argument("--budget", dest="prompt_opt.budget", type=int)

    p = sub.add_parser("distill", help="toy knowledge distillation with low-rank adapters")
    _common(p)
    p.add_argument("--seeds", dest="distill.seeds", type=int)
    p.add_argument("--steps", dest="distill.steps", type=int)

    p = sub.add_parser("quantize", help="RTN / activation-aware quantization")
    _common(p)
    p.add_argument("--weights", dest="paths.weights", help=".npy weight matrix")
    p.add_argument("--calibration", dest="paths.calibration", help=".npy calibration batch")
    p.add_argument("--instances", dest="quant.instances", type=int, help="benchmark size")
    p.add_argument("--bits", dest="quant.bits", type=int)
    p.add_argument("--group-size", dest="quant.group_size", type=int)

    p = sub.add_parser("evaluate", help="score predictions against reference labels")
    _common(p)
    p.add_argument("--refs", dest="paths.refs")
    p.add_argument("--preds", dest="paths.preds")
    p.add_argument("--library", dest="paths.library")

    p = sub.add_parser("report", help="render saved reports as one table")
    _common(p)
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--names", nargs="+")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    ov = {}
    for key, value in vars(args).items():
        if key in ("config", "command", "simulate", "corruption", "reports", "names"):
            continue
        ov[key] = value
    if args.command == "mine" and args.simulate is not None:
        sim = {"frames": args.simulate}
        if args.corruption is not None:
            sim["corruption"] = args.corruption
        ov["mining.simulate"] = sim
    if args.command == "report":
        ov["eval.reports"] = args.reports
        ov["eval.names"] = args.names
    return ov


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return EXIT_INPUT if isinstance(cause, INPUT_ERRORS) else EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    Run.last = None
    try:
        cfg = load_config(args.config, _overrides(args))
        run = RUNNERS[args.command](cfg)
    except (DriveSceneError, OSError, ValueError) as exc:
        code = _exit_code(exc)
        if Run.last is not None:
            Run.last.finish("error", f"{type(exc).__name__}: {exc}")
        print(f"drivescene {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    meta = run.finish()
    summary = {"run_dir": str(run.dir), "artifacts": sorted(meta["artifacts"])}
    if "average" in meta:
        summary["average"] = meta["average"]
    print(json.dumps(summary, indent=2))
    if "table" in meta:
        print(meta["table"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
