"""Command line entry point: ``safa-motion-kit <subcommand> --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import PipelineConfig, StageError, compute_metrics, run_fit, run_reenact, run_transfer, write_toy_assets

_RUNNERS = {"fit": run_fit, "reenact": run_reenact, "transfer": run_transfer}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safa-motion-kit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "fit model parameters to 2D landmarks"),
        ("reenact", "self-reenactment of a source image"),
        ("transfer", "relative motion transfer over a driving sequence"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--jobs", type=int, default=None, help="parallel frames / fits")
        p.add_argument("--output", type=Path, default=None, help="output directory (overrides the config)")

    m = sub.add_parser("metrics", help="L1 / PSNR / SSIM between images or directories of PNGs")
    m.add_argument("paths", nargs="*", type=Path, help="PREDICTION TARGET")
    m.add_argument("--config", type=Path, default=None, help='JSON with "prediction" and "target"')
    m.add_argument("--output", type=Path, default=None, help="directory for metrics.json")
    m.add_argument("--jobs", type=int, default=None, help=argparse.SUPPRESS)

    t = sub.add_parser("toy-assets", help="write a synthetic model, fixtures and configs")
    t.add_argument("--output", type=Path, default=Path("toy"))
    t.add_argument("--config", type=Path, default=None, help="optional JSON with seed/mode/size/num_keypoints/frames")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mode", choices=("identity", "random"), default=None)
    t.add_argument("--size", type=int, default=None)
    t.add_argument("--frames", type=int, default=None)
    t.add_argument("--jobs", type=int, default=None, help=argparse.SUPPRESS)
    return parser


def _metrics(args: argparse.Namespace) -> dict:
    if args.config is not None:
        record = json.loads(args.config.read_text())
        base = args.config.parent
        prediction, target = base / record["prediction"], base / record["target"]
    elif len(args.paths) == 2:
        prediction, target = args.paths
    else:
        raise StageError("config", "metrics needs PREDICTION TARGET or --config")
    result = compute_metrics(prediction, target)
    if args.output is not None:
        args.output.mkdir(parents=True, exist_ok=True)
        (args.output / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _toy_assets(args: argparse.Namespace) -> dict:
    options = json.loads(args.config.read_text()) if args.config is not None else {}
    for name in ("seed", "mode", "size", "frames"):
        value = getattr(args, name)
        if value is not None:
            options[name] = value
    return write_toy_assets(args.output, **options)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "metrics":
            result = _metrics(args)
        elif args.command == "toy-assets":
            result = _toy_assets(args)
        else:
            config = PipelineConfig.from_json(args.config, jobs=args.jobs, output=args.output)
            result = _RUNNERS[args.command](config)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
