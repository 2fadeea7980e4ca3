"""Command-line entry point.

Example::

    adextract --images data/bottle --masks data/bottle_masks \\
        --category bottle --out out/bottle

Offline / test mode (no checkpoint download)::

    adextract --images data/bottle --category bottle --out out/bottle \\
        --random-init --depth 2 --text-depth 2 --layer-l 1 --layer-lp 2
"""

import argparse
import logging
import sys
from pathlib import Path

from .config import DEFAULT_MODEL, DEFAULT_TEMPLATES, ExtractionConfig
from .errors import ExtractorError
from .extraction import export_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adextract",
        description="Extract CLIP patch features from an image folder into "
        "an anomaly-detection tensor dataset.",
    )
    parser.add_argument("--images", required=True, type=Path,
                        help="folder with support/ and test/<group>/ images")
    parser.add_argument("--masks", type=Path, default=None,
                        help="folder with per-group ground-truth masks")
    parser.add_argument("--category", required=True, help="object category name")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="checkpoint identifier or local path")
    parser.add_argument("--layer-l", type=int, default=12,
                        help="block index for intermediate visual features")
    parser.add_argument("--layer-lp", type=int, default=24,
                        help="block index projected into the joint space")
    parser.add_argument("--template-normal", default=DEFAULT_TEMPLATES["normal"],
                        help="prompt template for the normal class ({} = category)")
    parser.add_argument("--template-anomalous", default=DEFAULT_TEMPLATES["anomalous"],
                        help="prompt template for the anomalous class")
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--random-init", action="store_true",
                        help="skip the checkpoint: randomly initialized weights "
                        "with the same geometry (offline/testing)")
    parser.add_argument("--depth", type=int, default=24,
                        help="vision depth for --random-init")
    parser.add_argument("--text-depth", type=int, default=12,
                        help="text depth for --random-init")
    parser.add_argument("--seed", type=int, default=0,
                        help="weight seed for --random-init")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = ExtractionConfig(
            category=args.category,
            images_dir=args.images,
            out_dir=args.out,
            masks_dir=args.masks,
            model=args.model,
            layer_l=args.layer_l,
            layer_lp=args.layer_lp,
            templates={
                "normal": args.template_normal,
                "anomalous": args.template_anomalous,
            },
            random_init=args.random_init,
            depth=args.depth,
            text_depth=args.text_depth,
            seed=args.seed,
            batch_size=args.batch_size,
        )
        manifest_path = export_dataset(config)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    print(manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
