"""Command line entry point: sdexport writes one attention bundle."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .capture import CaptureConfig, capture
from .errors import ExportError

log = logging.getLogger("sdexport")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdexport",
        description=(
            "Sample the fixed latent model and export its cross-attention "
            "maps as a bundle directory."
        ),
    )
    parser.add_argument("--prompt", required=True, help="text prompt to condition on")
    parser.add_argument("--seed", type=int, required=True, help="sampling seed in [0, 2**64)")
    parser.add_argument("--steps", type=int, required=True, help="number of sampling steps")
    parser.add_argument(
        "--layers",
        default="8,16,32,64",
        help="comma-separated attention grid sizes to record (default: all)",
    )
    parser.add_argument(
        "--tokens",
        choices=("all", "class"),
        default="all",
        help="record every prompt token or only the class word's tokens",
    )
    parser.add_argument(
        "--class-word",
        default=None,
        help="class word whose sub-word tokens to record when --tokens class",
    )
    parser.add_argument("--out", required=True, help="bundle directory to write")
    return parser


def _parse_layers(text: str) -> tuple[int, ...]:
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if not parts:
        raise ExportError(f"--layers {text!r} names no resolutions")
    try:
        return tuple(int(part) for part in parts)
    except ValueError:
        raise ExportError(f"--layers {text!r} is not a comma-separated list of integers") from None


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = CaptureConfig(
            prompt=args.prompt,
            seed=args.seed,
            steps=args.steps,
            out_dir=args.out,
            layers=_parse_layers(args.layers),
            tokens=args.tokens,
            class_word=args.class_word,
        )
        out = capture(config)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: distinct exit code for scripting
        log.error("%s", exc, exc_info=True)
        return 1
    summary = {
        "out": str(out),
        "seed": args.seed,
        "steps": args.steps,
        "layers": list(_parse_layers(args.layers)),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
