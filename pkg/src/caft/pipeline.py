"""Batch wiring of the pipeline stages over a dataset manifest.

Three-phase training flow: (a) cluster tokens into pseudo masks, (b) train
the first filter on them, (c) refine via quadrant stitching and train the
second filter on the refined targets. Inference merges, predicts, and boxes.
Every stage reads only its declared inputs, writes only under its output
directory, and derives all randomness from the configured seed, so reruns
are byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atf import AtfConfig, TrainConfig, atf_predict, hidden_activations, load_model, save_model, train_atf
from .cluster import (
    ClusterMetrics,
    ClusterResult,
    KMeansResult,
    class_token_affinity,
    cluster_tokens,
    clustering_metrics,
    foreground_mask,
    similarity_curve,
    similarity_matrix,
)
from .errors import DataError
from .evaluation import DEFAULT_CURVE_THRESHOLDS, evaluate
from .maskops import BBox, Mask, denoise, mask_to_box, read_pgm, write_bits, write_pgm
from .merge import MergedMap, MergeRatios, merge_maps
from .token_io import DatasetManifest, gt_boxes_of, load_manifest

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    alpha: MergeRatios = field(default_factory=MergeRatios)
    k: int = 3
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-4
    seed: int = 0
    sigma: float = 1.0
    filter_radius: int = 2
    threshold: float = 0.5
    blocks: int = 2
    kernel: int = 1
    epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    box_policy: str = "largest"
    iou_threshold: float = 0.5
    curve_thresholds: tuple = DEFAULT_CURVE_THRESHOLDS

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed config JSON: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
        if "alpha" in raw:
            raw["alpha"] = MergeRatios(*raw["alpha"])
        if "curve_thresholds" in raw:
            raw["curve_thresholds"] = tuple(raw["curve_thresholds"])
        return cls(**raw)

    def override(self, **kwargs) -> "PipelineConfig":
        updates = {key: value for key, value in kwargs.items() if value is not None}
        return replace(self, **updates)


def _image_seed(seed: int, index: int) -> int:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(seq.generate_state(1, np.uint64)[0])


def _write_json(payload, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _core_of(result: ClusterResult) -> KMeansResult:
    labels = np.concatenate(
        [result.assignments.ravel(), np.asarray([result.class_token_cluster], dtype=np.int64)]
    )
    return KMeansResult(
        labels=labels,
        centers=result.centers,
        k=result.k,
        inertia=result.inertia,
        iterations=result.iterations,
        seed=result.seed,
    )


def _joint_points(mmap: MergedMap) -> np.ndarray:
    return np.vstack([mmap.tokens(), mmap.class_token[None, :]])


def _metrics_payload(metrics: ClusterMetrics) -> dict:
    return metrics.to_dict()


def run_cluster(manifest: DatasetManifest, config: PipelineConfig, out_dir) -> dict:
    """Phase (a): merge, cluster, pick foreground, denoise, write masks."""
    out_dir = Path(out_dir)
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    per_image = {}
    failures = []
    empty_masks = 0
    for index, entry in enumerate(manifest.images):
        try:
            mmap = merge_maps(manifest.load_token_map(entry), config.alpha)
            result = cluster_tokens(
                mmap,
                k=config.k,
                seed=_image_seed(config.seed, index),
                restarts=config.restarts,
                max_iter=config.max_iter,
                tol=config.tol,
            )
            mask = denoise(
                foreground_mask(result), config.sigma, config.filter_radius, config.threshold
            )
            write_pgm(mask, masks_dir / f"{entry.id}.pgm")
            write_bits(mask, masks_dir / f"{entry.id}.bits")
            metrics = clustering_metrics(
                _joint_points(mmap), _core_of(result), result.class_token_cluster
            )
            if mask.foreground_count == 0:
                empty_masks += 1
            per_image[entry.id] = {
                "metrics": _metrics_payload(metrics),
                "class_token_affinity": class_token_affinity(mmap, result),
                "inertia": result.inertia,
                "iterations": result.iterations,
                "empty_mask": mask.foreground_count == 0,
            }
        except Exception as exc:  # per-image resilience: log, keep going
            log.warning("cluster stage failed for %s: %s", entry.id, exc)
            failures.append(entry.id)
    summary = {
        "images": per_image,
        "empty_mask_count": empty_masks,
        "failed": failures,
        "n_images": len(manifest.images),
    }
    _write_json(summary, out_dir / "summary.json")
    return summary


def _load_training_pairs(manifest: DatasetManifest, config: PipelineConfig, masks_dir: Path):
    missing = [
        entry.id
        for entry in manifest.images
        if not (masks_dir / f"{entry.id}.pgm").is_file()
    ]
    if missing:
        raise DataError(f"missing masks for images: {', '.join(missing)}")
    dataset = []
    for entry in manifest.images:
        mmap = merge_maps(manifest.load_token_map(entry), config.alpha)
        dataset.append((mmap, read_pgm(masks_dir / f"{entry.id}.pgm")))
    return dataset


def run_train(manifest: DatasetManifest, masks_dir, config: PipelineConfig, out_model, progress=None):
    """Phases (b)/(c): train a filter on per-image pseudo masks."""
    if not manifest.images:
        raise DataError("manifest lists no images")
    dataset = _load_training_pairs(manifest, config, Path(masks_dir))
    acfg = AtfConfig(
        dim=dataset[0][0].dim,
        n_hidden_blocks=config.blocks,
        first_kernel=config.kernel,
        seed=config.seed,
    )
    tcfg = TrainConfig(
        epochs=config.epochs,
        lr0=config.lr,
        momentum=config.momentum,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    model, train_log = train_atf(dataset, tcfg, acfg, progress=progress)
    out_model = Path(out_model)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out_model)
    train_log.write_csv(out_model.with_suffix(out_model.suffix + ".log.csv"))
    return model, train_log


def run_refine(manifest: DatasetManifest, model_path, config: PipelineConfig, out_dir) -> dict:
    """Phase (c) data prep: quadrant predictions stitched and reduced to
    grid-resolution training targets."""
    from .refine import refine_mask, refined_to_target

    model = load_model(model_path)
    out_dir = Path(out_dir)
    refined_dir = out_dir / "refined"
    targets_dir = out_dir / "targets"
    refined_dir.mkdir(parents=True, exist_ok=True)
    targets_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    skipped = []
    for entry in manifest.images:
        if entry.quadrant_maps is None:
            log.warning("image %s has no quadrant maps, skipping", entry.id)
            skipped.append(entry.id)
            continue
        quads = [merge_maps(tm, config.alpha) for tm in manifest.load_quadrants(entry)]
        refined = refine_mask(model, quads)
        target = refined_to_target(refined, config.threshold)
        write_pgm(Mask(refined.bits), refined_dir / f"{entry.id}.pgm")
        write_pgm(target, targets_dir / f"{entry.id}.pgm")
        write_bits(target, targets_dir / f"{entry.id}.bits")
        written += 1
    summary = {"written": written, "skipped": skipped, "n_images": len(manifest.images)}
    _write_json(summary, out_dir / "summary.json")
    return summary


def run_predict(
    manifest: DatasetManifest,
    model_path,
    config: PipelineConfig,
    out_path,
    apply_denoise: bool = False,
) -> dict:
    """Inference: merge, predict, optionally denoise, box."""
    model = load_model(model_path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    boxes = {}
    fallback_ids = []
    for entry in manifest.images:
        mmap = merge_maps(manifest.load_token_map(entry), config.alpha)
        mask = atf_predict(model, mmap)
        if apply_denoise:
            mask = denoise(mask, config.sigma, config.filter_radius, config.threshold)
        if mask.foreground_count == 0:
            fallback_ids.append(entry.id)
        box = mask_to_box(mask, manifest.patch_size, manifest.image_size, policy=config.box_policy)
        boxes[entry.id] = box.as_list()
    _write_json(boxes, out_path)
    _write_json(
        {"fallback_count": len(fallback_ids), "fallback_ids": fallback_ids},
        _meta_path(out_path),
    )
    return boxes


def _meta_path(pred_path: Path) -> Path:
    return pred_path.with_name(pred_path.stem + ".meta.json")


def run_eval(manifest: DatasetManifest, pred_path, config: PipelineConfig, out_dir) -> dict:
    """Scores a predictions file against manifest ground truth."""
    pred_path = Path(pred_path)
    try:
        raw = json.loads(pred_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{pred_path}: malformed predictions JSON: {exc}") from exc
    manifest_ids = {entry.id for entry in manifest.images}
    pred_ids = set(raw)
    if manifest_ids != pred_ids:
        missing = sorted(manifest_ids - pred_ids)
        extra = sorted(pred_ids - manifest_ids)
        raise DataError(f"prediction ids misaligned: missing {missing}, unexpected {extra}")
    preds = {image_id: BBox(*box) for image_id, box in raw.items()}
    gts = {entry.id: gt_boxes_of(entry) for entry in manifest.images}
    gt_classes = {entry.id: entry.gt_class for entry in manifest.images}
    pred_classes = {entry.id: entry.pred_classes for entry in manifest.images}
    fallback_count = 0
    meta = _meta_path(pred_path)
    if meta.is_file():
        fallback_count = int(json.loads(meta.read_text()).get("fallback_count", 0))
    report = evaluate(
        preds,
        gts,
        gt_classes,
        pred_classes,
        threshold=config.iou_threshold,
        curve_thresholds=config.curve_thresholds,
        fallback_count=fallback_count,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out_dir / "report.json")
    with open(out_dir / "curve.csv", "w") as fh:
        fh.write("iou_threshold,gt_known_loc\n")
        for threshold, value in report.curve:
            fh.write(f"{threshold!r},{value!r}\n")
    return report.to_dict()


def run_diagnose(
    manifest: DatasetManifest,
    config: PipelineConfig,
    out_dir,
    model_path=None,
    anchor=None,
) -> dict:
    """Similarity matrices/curves and clustering-quality metrics per image;
    with a model, the same metrics on each hidden block's activations."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(model_path) if model_path else None
    produced = []
    for index, entry in enumerate(manifest.images):
        mmap = merge_maps(manifest.load_token_map(entry), config.alpha)
        sim = similarity_matrix(mmap)
        np.savetxt(out_dir / f"{entry.id}.similarity.csv", sim, fmt="%.10g", delimiter=",")
        cell = anchor if anchor is not None else (mmap.height // 2, mmap.width // 2)
        curve = similarity_curve(mmap, cell)
        np.savetxt(out_dir / f"{entry.id}.curve.csv", curve[None, :], fmt="%.10g", delimiter=",")
        seed = _image_seed(config.seed, index)
        payload = {"anchor": list(cell)}
        payload.update(_stage_metrics(mmap, config, seed))
        if model is not None:
            block_payloads = []
            acts = hidden_activations(model, mmap)
            ct_acts = hidden_activations(
                model,
                MergedMap(
                    grid=mmap.class_token.reshape(1, 1, -1), class_token=mmap.class_token
                ),
            )
            for act, ct_act in zip(acts, ct_acts):
                stage = MergedMap(grid=np.asarray(act, dtype=np.float64),
                                  class_token=np.asarray(ct_act[0, 0], dtype=np.float64))
                block_payloads.append(_stage_metrics(stage, config, seed))
            payload["blocks"] = block_payloads
        _write_json(payload, out_dir / f"{entry.id}.metrics.json")
        produced.append(entry.id)
    return {"images": produced}


def _stage_metrics(mmap: MergedMap, config: PipelineConfig, seed: int) -> dict:
    result = cluster_tokens(
        mmap,
        k=config.k,
        seed=seed,
        restarts=config.restarts,
        max_iter=config.max_iter,
        tol=config.tol,
    )
    metrics = clustering_metrics(_joint_points(mmap), _core_of(result), result.class_token_cluster)
    return {
        "metrics": _metrics_payload(metrics),
        "class_token_affinity": class_token_affinity(mmap, result),
    }


def load_manifest_checked(path) -> DatasetManifest:
    return load_manifest(path)
