"""CLI: mpft-export --model <id> --data <dir> --out <file>."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError
from .export import ExportSpec, export_features
from .models import REGISTRY


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpft-export",
        description="Dump frozen token features from a pretrained backbone "
                    "into an MPFT feature file.")
    parser.add_argument("--model", required=True,
                        help=f"backbone id, one of {sorted(REGISTRY)}")
    parser.add_argument("--data", required=True,
                        help="image directory (class-per-subdirectory, or flat)")
    parser.add_argument("--out", required=True, help="output .mpft path")
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--mode", default="auto",
                        choices=["auto", "cls+tokens", "tokens-only"])
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = parser.parse_args(argv)
        summary = export_features(ExportSpec(
            model=args.model, data_dir=args.data, out_path=args.out,
            batch_size=args.batch, device=args.device, mode=args.mode))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {summary.out_path}: {summary.exported} samples "
          f"({summary.skipped} skipped), {summary.tokens_per_sample} tokens x "
          f"{summary.feature_dim} dims, cls={int(summary.has_cls)}, "
          f"{len(summary.classes)} classes")
    print(f"class names: {summary.sidecar_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
