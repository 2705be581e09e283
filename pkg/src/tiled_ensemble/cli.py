"""``tiled-ensemble`` command line: synth, train, predict, eval and bench.

Exit codes: 0 success, 1 invalid configuration or incompatible model,
2 data error (missing/corrupt files, missing ground truth), 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path

from . import pipeline
from .config import PRESETS, ConfigError, PipelineConfig, SetupSection, config_from_dict, load_config, validate
from .dataio import DatasetError, generate_synthetic
from .ensemble import EnsembleError
from .metrics import MetricError, format_report
from .modelio import CorruptModelError, FingerprintMismatchError, ModelFormatError, VersionMismatchError
from .tiling import TilingError

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiled-ensemble", description="Tiled ensemble anomaly detection pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="override the worker count")
    common.add_argument("--out", type=Path, required=True, help="output directory for all artifacts")
    common.add_argument("--preset", choices=PRESETS, help="use a named setup geometry")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train an ensemble")
    for name in ("predict", "eval"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} with a trained ensemble")
        sp.add_argument("--model", type=Path, help="ensemble directory (default: <out>/ensemble)")
        if name == "predict":
            sp.add_argument("--input", type=Path, help="PNG file or folder (default: the dataset test split)")
    sub.add_parser("bench", parents=[common], help="compare setups on latency, throughput and memory")
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    if args.preset is not None and args.command != "bench":
        cfg = dataclasses.replace(cfg, setup=SetupSection(preset=args.preset, preset_tile=cfg.setup.preset_tile))
    return cfg


def _run(args) -> None:
    cfg = _config(args)
    for w in validate(cfg):
        print(f"warning: {w}", file=sys.stderr)
    out: Path = args.out
    if args.command == "synth":
        spec = cfg.synthetic_spec()
        base = generate_synthetic(spec, out)
        print(f"wrote synthetic category to {base}")
    elif args.command == "train":
        model_dir = pipeline.run_train(cfg, out)
        print(f"ensemble saved to {model_dir}")
    elif args.command == "predict":
        pipeline.run_predict(cfg, args.model or out / "ensemble", out, args.input)
        print(f"predictions written to {out}")
    elif args.command == "eval":
        record = pipeline.run_eval(cfg, args.model or out / "ensemble", out)
        print(format_report(record), end="")
    elif args.command == "bench":
        rows = pipeline.run_bench(cfg, out, [args.preset] if args.preset else None)
        print(pipeline.format_table(rows), end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _run(args)
    except (ConfigError, TilingError, FingerprintMismatchError, VersionMismatchError, EnsembleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, CorruptModelError, ModelFormatError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
