"""Export CLI: images in, CTM token maps and a manifest out."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbone import PRESETS, BackboneConfig, make_random_checkpoint
from .export import ExportConfig, export_tokens


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caft-export", description=__doc__)
    parser.add_argument("--images", required=True, help="image directory or list file")
    parser.add_argument(
        "--backbone", default="base-384",
        help=f"preset ({', '.join(sorted(PRESETS))}) or a checkpoint path",
    )
    parser.add_argument("--checkpoint", help="weights for a preset backbone")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--quadrants", action="store_true", help="also export image quarters")
    parser.add_argument("--center-crop", action="store_true",
                        help="resize short side and crop instead of direct resize")
    parser.add_argument("--annotations", help="JSON with per-image class/boxes")
    parser.add_argument("--sample-per-class", type=int)
    parser.add_argument("--top-k", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = ExportConfig(
        backbone=args.backbone,
        checkpoint=args.checkpoint,
        center_crop=args.center_crop,
        top_k=args.top_k,
        sample_per_class=args.sample_per_class,
        quadrants=args.quadrants,
        seed=args.seed,
    )
    try:
        manifest = export_tokens(args.images, cfg, args.out, args.annotations)
    except (ValueError, OSError) as exc:
        print(f"caft-export: {exc}", file=sys.stderr)
        return 2
    print(f"manifest written to {manifest}")
    return 0


def init_main(argv=None) -> int:
    """Entry point for `python -m caft_exporter.cli init`: writes a randomly
    initialized checkpoint for dry runs (--dim/--depth/... flags)."""
    parser = argparse.ArgumentParser(prog="caft-export-init")
    parser.add_argument("--out", required=True)
    parser.add_argument("--depth", type=int, default=12)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--heads", type=int, default=12)
    parser.add_argument("--patch-size", type=int, default=16)
    parser.add_argument("--resolution", type=int, default=384)
    parser.add_argument("--n-classes", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    config = BackboneConfig(
        depth=args.depth, dim=args.dim, heads=args.heads,
        patch_size=args.patch_size, resolution=args.resolution, n_classes=args.n_classes,
    )
    make_random_checkpoint(config, args.out, args.seed)
    print(f"checkpoint written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
