"""Token-map export: runs images (and optionally their four quadrants)
through a transformer checkpoint and writes CTM files plus a dataset
manifest with the backbone's top-k class predictions.

Preprocessing default is a direct resize to the network resolution; center
cropping (resize the short side to resolution/0.875, crop the middle) is an
opt-in evaluation-protocol variant. Quadrants are exact quarters of the
original image, each resized to full network resolution, listed top-left,
top-right, bottom-left, bottom-right.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import PRESETS, VisionBackbone, load_checkpoint
from .ctm import write_ctm

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
CROP_RATIO = 0.875


@dataclass
class ExportConfig:
    backbone: str = "base-384"
    checkpoint: str | None = None
    center_crop: bool = False
    top_k: int = 5
    sample_per_class: int | None = None
    quadrants: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.sample_per_class is not None and self.sample_per_class < 1:
            raise ValueError("sample_per_class must be >= 1")


def resolve_backbone(cfg: ExportConfig) -> VisionBackbone:
    """Preset name plus --checkpoint, or a checkpoint path as the backbone id."""
    if cfg.backbone in PRESETS:
        if not cfg.checkpoint:
            raise ValueError(f"backbone {cfg.backbone!r} needs --checkpoint with its weights")
        model = load_checkpoint(cfg.checkpoint)
        preset = PRESETS[cfg.backbone]
        if (model.config.dim, model.config.depth) != (preset.dim, preset.depth):
            raise ValueError(
                f"checkpoint architecture {model.config} does not match preset {cfg.backbone}"
            )
        return model
    path = Path(cfg.backbone)
    if path.is_file():
        return load_checkpoint(path)
    raise ValueError(f"unknown backbone {cfg.backbone!r} (presets: {sorted(PRESETS)})")


def list_images(source) -> list:
    """Image paths from a directory (recursive, sorted) or a list file."""
    source = Path(source)
    if source.is_dir():
        paths = sorted(
            p for p in source.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not paths:
            raise ValueError(f"{source}: no images found")
        return paths
    if source.is_file():
        paths = [Path(line.strip()) for line in source.read_text().splitlines() if line.strip()]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise ValueError(f"{source}: missing listed images: {', '.join(missing)}")
        return paths
    raise ValueError(f"{source}: not a directory or list file")


def sample_per_class(paths, per_class: int, seed: int) -> list:
    """Caps images per class, class = parent directory name; deterministic."""
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for path in paths:
        groups.setdefault(path.parent.name, []).append(path)
    kept = []
    for name in sorted(groups):
        members = sorted(groups[name])
        if len(members) > per_class:
            chosen = rng.choice(len(members), size=per_class, replace=False)
            members = [members[i] for i in sorted(chosen)]
        kept.extend(members)
    return kept


def preprocess(image: Image.Image, resolution: int, center_crop: bool) -> Image.Image:
    if not center_crop:
        return image.resize((resolution, resolution), Image.BILINEAR)
    short = round(resolution / CROP_RATIO)
    scale = short / min(image.size)
    resized = image.resize(
        (round(image.width * scale), round(image.height * scale)), Image.BILINEAR
    )
    left = (resized.width - resolution) // 2
    top = (resized.height - resolution) // 2
    return resized.crop((left, top, left + resolution, top + resolution))


def transform_box(box, image_size, resolution: int, center_crop: bool):
    """Maps an original-pixel box into the preprocessed coordinate frame;
    None when cropping removes it entirely."""
    w0, h0 = image_size
    x0, y0, x1, y1 = box
    if not center_crop:
        sx, sy = resolution / w0, resolution / h0
        return [x0 * sx, y0 * sy, x1 * sx, y1 * sy]
    short = round(resolution / CROP_RATIO)
    scale = short / min(w0, h0)
    left = (round(w0 * scale) - resolution) // 2
    top = (round(h0 * scale) - resolution) // 2
    x0, x1 = x0 * scale - left, x1 * scale - left
    y0, y1 = y0 * scale - top, y1 * scale - top
    x0, x1 = max(0.0, min(float(resolution), x0)), max(0.0, min(float(resolution), x1))
    y0, y1 = max(0.0, min(float(resolution), y0)), max(0.0, min(float(resolution), y1))
    if x0 >= x1 or y0 >= y1:
        return None
    return [x0, y0, x1, y1]


def quadrant_boxes(width: int, height: int) -> list:
    """Four half-open crops that exactly tile the image, row-major order."""
    mw, mh = width // 2, height // 2
    return [
        (0, 0, mw, mh),
        (mw, 0, width, mh),
        (0, mh, mw, height),
        (mw, mh, width, height),
    ]


def _to_tensor(image: Image.Image) -> torch.Tensor:
    array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    array = (array - 0.5) / 0.5
    return torch.from_numpy(array.transpose(2, 0, 1))[None]


@torch.no_grad()
def _extract(model: VisionBackbone, image: Image.Image):
    """(layers (3,H,W,D), class_tokens (3,D), top-k class ids) for one
    preprocessed image."""
    side = model.config.grid_side
    logits, captured = model.forward_tokens(_to_tensor(image))
    layers = []
    class_tokens = []
    for tokens in captured:  # forward order: deepest block last
        seq = tokens[0].numpy()
        class_tokens.append(seq[0])
        layers.append(seq[1:].reshape(side, side, model.config.dim))
    order = np.argsort(logits[0].numpy())[::-1]
    return np.stack(layers), np.stack(class_tokens), [int(c) for c in order]


def _positional_parts(model: VisionBackbone):
    side = model.config.grid_side
    pos = model.pos_embed.detach()[0].numpy()
    return pos[1:].reshape(side, side, model.config.dim), pos[0]


def _image_id(path: Path, root: Path | None) -> str:
    if root is not None and root in path.parents:
        rel = path.relative_to(root)
        return "_".join(rel.with_suffix("").parts)
    return path.stem


def export_tokens(images_source, cfg: ExportConfig, out_dir, annotations=None) -> Path:
    """Exports every image (plus quadrants when configured) and writes the
    manifest; returns the manifest path. Deterministic across reruns."""
    torch.set_num_threads(1)  # bit-stable reductions across runs
    model = resolve_backbone(cfg)
    resolution = model.config.resolution
    patch = model.config.patch_size
    out_dir = Path(out_dir)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)

    paths = list_images(images_source)
    root = Path(images_source) if Path(images_source).is_dir() else None
    if cfg.sample_per_class is not None:
        paths = sample_per_class(paths, cfg.sample_per_class, cfg.seed)

    notes = {}
    if annotations is not None:
        notes = json.loads(Path(annotations).read_text())

    pos_grid, pos_class = _positional_parts(model)
    entries = []
    for path in paths:
        image_id = _image_id(path, root)
        with Image.open(path) as raw:
            original = raw.convert("RGB")
        layers, class_tokens, top = _extract(
            model, preprocess(original, resolution, cfg.center_crop)
        )
        rel = f"maps/{image_id}.ctm"
        write_ctm(maps_dir / f"{image_id}.ctm", layers, class_tokens, pos_grid, pos_class)
        entry = {"id": image_id, "token_map": rel, "pred_classes": top[: cfg.top_k]}

        note = notes.get(path.name) or notes.get(str(path))
        if note:
            if "class" in note:
                entry["gt_class"] = int(note["class"])
            boxes = []
            for box in note.get("boxes", []):
                mapped = transform_box(box, original.size, resolution, cfg.center_crop)
                if mapped is None:
                    log.warning("%s: box %s cropped away", image_id, box)
                else:
                    boxes.append(mapped)
            if boxes:
                entry["gt_boxes"] = boxes

        if cfg.quadrants:
            quad_rels = []
            for qi, crop in enumerate(quadrant_boxes(*original.size)):
                quarter = preprocess(original.crop(crop), resolution, cfg.center_crop)
                q_layers, q_class, _ = _extract(model, quarter)
                q_rel = f"maps/{image_id}.q{qi}.ctm"
                write_ctm(maps_dir / f"{image_id}.q{qi}.ctm", q_layers, q_class, pos_grid, pos_class)
                quad_rels.append(q_rel)
            entry["quadrant_maps"] = quad_rels
        entries.append(entry)

    manifest = {
        "version": 1,
        "patch_size": patch,
        "image_size": [resolution, resolution],
        "images": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
