"""Command-line entry point.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig
from .data_io import FormatError


VERBS = ("generate", "train", "classify-train", "saliency", "eval", "ablate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdmseg", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", required=True, help="key = value run configuration")
    p.add_argument("--method", default="cg-cdm", choices=pipeline.METHODS)
    p.add_argument("--axis", choices=sorted(pipeline.AXES))
    p.add_argument("--values", help="comma-separated ablation values")
    p.add_argument("--out", help="run directory (default: runs/<timestamp>-seed<N>)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "config")
    cfg = RunConfig.load(path)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def run(args) -> int:
    cfg = _load_config(args)
    out = pipeline.run_dir(cfg, args.out)
    if args.verb == "generate":
        pipeline.generate(cfg, out)
    elif args.verb == "train":
        pipeline.train(cfg, out)
    elif args.verb == "classify-train":
        pipeline.classify_train(cfg, out)
    elif args.verb == "saliency":
        pipeline.saliency(cfg, out, args.method)
    elif args.verb == "eval":
        pred = Path(cfg.pred_dir) if cfg.pred_dir else out / "maps"
        report = pipeline.evaluate(cfg, pred, out)
        agg = report.aggregate()
        print(f"dice {agg['dice']['mean']:.4f} +- {agg['dice']['std']:.4f}  "
              f"iou {agg['iou']['mean']:.4f} +- {agg['iou']['std']:.4f}  "
              f"hd95 {agg['hd95']['mean']:.2f} +- {agg['hd95']['std']:.2f}")
        if report.missing:
            shown = ", ".join(report.missing[:10])
            print(f"error: {len(report.missing)} predictions missing: {shown}", file=sys.stderr)
            return 1
    elif args.verb == "ablate":
        if not args.axis or not args.values:
            raise ConfigError("ablate needs --axis and --values", "axis")
        values = pipeline.parse_values(args.axis, args.values)
        csv_path = pipeline.ablate(cfg, out, args.method, args.axis, values)
        print(csv_path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return 2
    except (pipeline.PipelineError, FormatError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
