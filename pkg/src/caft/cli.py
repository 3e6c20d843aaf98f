"""Command-line front end.

Subcommands: cluster, train, refine, predict, eval, diagnose, synth, and
selftest (quick oracle cross-checks). Exit codes: 0 success, 1 usage error,
2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import CaftError, DataError
from .merge import MergeRatios
from .pipeline import (
    PipelineConfig,
    run_cluster,
    run_diagnose,
    run_eval,
    run_predict,
    run_refine,
    run_train,
)
from .synth import SynthConfig, write_synthetic
from .token_io import load_manifest

log = logging.getLogger("caft")

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_common(parser):
    parser.add_argument("--config", help="pipeline config JSON; flags override it")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--alpha", help="merge ratios a0,a1,a2,ap")
    parser.add_argument("--k", type=int, help="cluster count")
    parser.add_argument("--sigma", type=float, help="denoise filter sigma")
    parser.add_argument("--filter-radius", type=int, help="denoise kernel radius in cells")
    parser.add_argument("--threshold", type=float, help="binarization threshold")
    parser.add_argument("--box-policy", choices=("largest", "all"), help="box extraction policy")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--lr", type=float, help="initial learning rate")
    parser.add_argument("--blocks", type=int, help="hidden block count")
    parser.add_argument("--kernel", type=int, choices=(1, 3), help="first block kernel size")


def _config_from(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    alpha = MergeRatios.parse(args.alpha) if args.alpha else None
    return config.override(
        alpha=alpha,
        seed=args.seed,
        k=args.k,
        sigma=args.sigma,
        filter_radius=args.filter_radius,
        threshold=args.threshold,
        box_policy=args.box_policy,
        epochs=args.epochs,
        lr=args.lr,
        blocks=args.blocks,
        kernel=args.kernel,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cluster", help="phase (a): pseudo masks from token clustering")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train a filter on pseudo masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True, help="directory of <id>.pgm pseudo masks")
    p.add_argument("--out", required=True, help="output model path")
    _add_common(p)

    p = sub.add_parser("refine", help="phase (c) prep: quadrant-stitched training targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("predict", help="boxes from a trained filter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--denoise", action="store_true", help="smooth masks before boxing")
    _add_common(p)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="predictions JSON path")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--thresholds", help="comma-separated curve thresholds")
    _add_common(p)

    p = sub.add_parser("diagnose", help="similarity and clustering-quality diagnostics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="include per-block activation metrics")
    p.add_argument("--anchor", help="similarity-curve anchor cell r,c")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--flip-rate", type=float, default=0.02)
    p.add_argument("--rect-min", type=float, default=0.1)
    p.add_argument("--rect-max", type=float, default=0.4)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="run the built-in oracle cross-checks")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_cluster(args) -> int:
    summary = run_cluster(load_manifest(args.manifest), _config_from(args), args.out)
    print(
        f"clustered {len(summary['images'])}/{summary['n_images']} images, "
        f"{summary['empty_mask_count']} empty masks, {len(summary['failed'])} failures"
    )
    return 0


def _cmd_train(args) -> int:
    def progress(epoch, loss, acc, lr):
        print(f"epoch {epoch}: loss {loss:.6f} token_acc {acc:.4f} lr {lr:.6f}")

    run_train(load_manifest(args.manifest), args.masks, _config_from(args), args.out, progress)
    print(f"model written to {args.out}")
    return 0


def _cmd_refine(args) -> int:
    summary = run_refine(load_manifest(args.manifest), args.model, _config_from(args), args.out)
    print(f"refined {summary['written']} images, skipped {len(summary['skipped'])}")
    return 0


def _cmd_predict(args) -> int:
    boxes = run_predict(
        load_manifest(args.manifest), args.model, _config_from(args), args.out, args.denoise
    )
    print(f"wrote {len(boxes)} boxes to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = _config_from(args)
    if args.thresholds:
        try:
            config = config.override(
                curve_thresholds=tuple(float(t) for t in args.thresholds.split(","))
            )
        except ValueError as exc:
            raise DataError(f"bad thresholds {args.thresholds!r}") from exc
    report = run_eval(load_manifest(args.manifest), args.pred, config, args.out)
    print(
        f"gt_known {report['gt_known_loc']:.2f}% top1 {_fmt(report['top1_loc'])} "
        f"top5 {_fmt(report['top5_loc'])} mean_iou {report['mean_iou']:.4f} "
        f"fallbacks {report['fallback_count']}"
    )
    return 0


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}%"


def _cmd_diagnose(args) -> int:
    anchor = None
    if args.anchor:
        try:
            r, c = (int(v) for v in args.anchor.split(","))
            anchor = (r, c)
        except ValueError as exc:
            raise DataError(f"bad anchor {args.anchor!r}, expected r,c") from exc
    result = run_diagnose(
        load_manifest(args.manifest), _config_from(args), args.out, args.model, anchor
    )
    print(f"diagnostics for {len(result['images'])} images in {args.out}")
    return 0


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        height=args.height,
        width=args.width,
        dim=args.dim,
        n_images=args.n_images,
        rect_fraction=(args.rect_min, args.rect_max),
        separation=args.separation,
        noise_flip_rate=args.flip_rate,
        seed=args.seed,
        patch_size=args.patch_size,
    )
    manifest = write_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.images)} synthetic images under {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest

    return selftest.run(instances=args.instances, seed=args.seed)


_HANDLERS = {
    "cluster": _cmd_cluster,
    "train": _cmd_train,
    "refine": _cmd_refine,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "synth": _cmd_synth,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except CaftError as exc:
        print(f"caft {args.command}: {exc}", file=sys.stderr)
        return DATA_EXIT
    except OSError as exc:
        print(f"caft {args.command}: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
