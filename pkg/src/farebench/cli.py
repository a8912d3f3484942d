"""Command line entry point: ``farebench <subcommand> --config path [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .config import MODELS, PipelineConfig, load_config
from .errors import exit_code_for
from .evaluation import VARIANTS
from .pipeline import run_pipeline, run_stage

log = logging.getLogger("farebench")

SUBCOMMANDS = ("ingest", "preprocess", "perturb", "denoise", "train", "evaluate", "report", "run_pipeline", "show_config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="farebench", description="Noise-robustness benchmark for taxi-fare regressors.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "ingest": "parse the input CSV into the stage cache",
        "preprocess": "impute, filter, engineer features, split and fit the normalizer",
        "perturb": "inject Gaussian noise and write the KS report",
        "denoise": "fit the denoising autoencoder and build the denoised variant",
        "train": "train models on dataset variants",
        "evaluate": "score trained models and write eval reports",
        "report": "rebuild comparison.csv from existing eval reports",
        "run_pipeline": "run every stage, reusing matching cached stages",
        "show_config": "print the resolved configuration as JSON",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry by dotted key, e.g. models.gat.max_epochs=10")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate"):
            p.add_argument("--model", choices=MODELS)
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg: PipelineConfig = load_config(args.config, args.overrides)
        if stage == "show_config":
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        t0 = time.perf_counter()
        if stage == "run_pipeline":
            run_pipeline(cfg)
        else:
            run_stage(cfg, stage, getattr(args, "model", None), getattr(args, "variant", None))
        log.info("%s finished in %.1f s", stage, time.perf_counter() - t0)
    except Exception as exc:  # mapped to documented exit codes
        code = exit_code_for(exc)
        if args.verbose:
            log.exception("%s failed", stage)
        print(f"farebench {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
