"""Token-map interchange format (CTM) and dataset manifest.

CTM layout, all little-endian:

* header (28 bytes): magic ``CAFT``, version u32 = 1, n_layers u32, H u32,
  W u32, D u32, flags u32 (bit0 = positional grid present, bit1 = positional
  class entry present, other bits must be zero)
* payload (float32): per layer the grid row-major [row][col][dim] followed by
  that layer's class token [dim]; then the positional grid if bit0, then the
  positional class entry if bit1.

File size is exactly determined by the header; any mismatch is rejected.
The manifest is a JSON document; token-map paths inside it are resolved
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .maskops import BBox

MAGIC = b"CAFT"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
MANIFEST_VERSION = 1


@dataclass
class TokenMap:
    """Stack of spatial token grids plus class tokens and optional positional embedding.

    ``grid`` has shape (L, H, W, D), ``class_tokens`` (L, D); the positional
    grid (H, W, D) and positional class entry (D,) are optional, and the class
    entry may be present only alongside the grid.
    """

    grid: np.ndarray
    class_tokens: np.ndarray
    pos_grid: np.ndarray | None = None
    pos_class: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        self.class_tokens = np.asarray(self.class_tokens, dtype=np.float32)
        if self.pos_grid is not None:
            self.pos_grid = np.asarray(self.pos_grid, dtype=np.float32)
        if self.pos_class is not None:
            self.pos_class = np.asarray(self.pos_class, dtype=np.float32)

    @property
    def n_layers(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    @property
    def width(self) -> int:
        return self.grid.shape[2]

    @property
    def dim(self) -> int:
        return self.grid.shape[3]


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def validate_token_map(tm: TokenMap) -> ValidationReport:
    """Checks every structural invariant; never raises."""
    report = ValidationReport()
    if tm.grid.ndim != 4:
        report.add(f"grid must be 4-D (L,H,W,D), got shape {tm.grid.shape}")
        return report
    n_layers, h, w, d = tm.grid.shape
    if min(n_layers, h, w, d) < 1:
        report.add(f"all dimensions must be >= 1, got L={n_layers} H={h} W={w} D={d}")
    if tm.class_tokens.shape != (n_layers, d):
        report.add(
            f"class_tokens shape {tm.class_tokens.shape} != ({n_layers}, {d})"
        )
    if not np.isfinite(tm.grid).all():
        layer, row, col, dim = np.argwhere(~np.isfinite(tm.grid))[0]
        report.add(f"non-finite value in grid at layer {layer}, cell ({row}, {col}), dim {dim}")
    if not np.isfinite(tm.class_tokens).all():
        layer, dim = np.argwhere(~np.isfinite(tm.class_tokens))[0]
        report.add(f"non-finite value in class token of layer {layer}, dim {dim}")
    if tm.pos_grid is not None:
        if tm.pos_grid.shape != (h, w, d):
            report.add(f"pos_grid shape {tm.pos_grid.shape} != ({h}, {w}, {d})")
        elif not np.isfinite(tm.pos_grid).all():
            row, col, dim = np.argwhere(~np.isfinite(tm.pos_grid))[0]
            report.add(f"non-finite value in pos_grid at cell ({row}, {col}), dim {dim}")
    if tm.pos_class is not None:
        if tm.pos_grid is None:
            report.add("pos_class present without pos_grid")
        if tm.pos_class.shape != (d,):
            report.add(f"pos_class shape {tm.pos_class.shape} != ({d},)")
        elif not np.isfinite(tm.pos_class).all():
            report.add("non-finite value in pos_class")
    return report


def _payload_floats(n_layers: int, h: int, w: int, d: int, flags: int) -> int:
    count = n_layers * (h * w * d + d)
    if flags & 1:
        count += h * w * d
    if flags & 2:
        count += d
    return count


def write_token_map(tm: TokenMap, destination) -> None:
    """Writes a CTM file; byte-deterministic for identical input."""
    report = validate_token_map(tm)
    if not report.ok:
        raise DataError("invalid token map: " + "; ".join(report.violations))
    flags = (1 if tm.pos_grid is not None else 0) | (2 if tm.pos_class is not None else 0)
    with open(destination, "wb") as fh:
        fh.write(
            _HEADER.pack(MAGIC, VERSION, tm.n_layers, tm.height, tm.width, tm.dim, flags)
        )
        for layer in range(tm.n_layers):
            fh.write(tm.grid[layer].astype("<f4").tobytes())
            fh.write(tm.class_tokens[layer].astype("<f4").tobytes())
        if tm.pos_grid is not None:
            fh.write(tm.pos_grid.astype("<f4").tobytes())
        if tm.pos_class is not None:
            fh.write(tm.pos_class.astype("<f4").tobytes())


def read_token_map(source) -> TokenMap:
    """Parses and validates a CTM file."""
    with open(source, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, n_layers, h, w, d, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if flags & ~3:
        raise FormatError(f"{source}: unsupported flags 0x{flags:x}")
    if min(n_layers, h, w, d) < 1:
        raise FormatError(f"{source}: invalid dimensions L={n_layers} H={h} W={w} D={d}")
    expected = _HEADER.size + 4 * _payload_floats(n_layers, h, w, d, flags)
    if len(data) < expected:
        raise FormatError(f"{source}: truncated payload, expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{source}: trailing data, expected {expected} bytes, got {len(data)}")
    floats = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    per_layer = h * w * d + d
    grid = np.empty((n_layers, h, w, d), dtype=np.float32)
    class_tokens = np.empty((n_layers, d), dtype=np.float32)
    for layer in range(n_layers):
        chunk = floats[layer * per_layer : (layer + 1) * per_layer]
        grid[layer] = chunk[: h * w * d].reshape(h, w, d)
        class_tokens[layer] = chunk[h * w * d :]
    offset = n_layers * per_layer
    pos_grid = pos_class = None
    if flags & 1:
        pos_grid = floats[offset : offset + h * w * d].reshape(h, w, d).copy()
        offset += h * w * d
    if flags & 2:
        pos_class = floats[offset : offset + d].copy()
    tm = TokenMap(grid=grid, class_tokens=class_tokens, pos_grid=pos_grid, pos_class=pos_class)
    report = validate_token_map(tm)
    if not report.ok:
        raise FormatError(f"{source}: " + "; ".join(report.violations))
    return tm


@dataclass
class ImageEntry:
    """One manifest row: token-map path plus optional labels.

    ``quadrant_maps`` lists the four quarter exports in row-major order
    (top-left, top-right, bottom-left, bottom-right).
    """

    id: str
    token_map: str
    quadrant_maps: list | None = None
    gt_boxes: list | None = None
    gt_class: int | None = None
    pred_classes: list | None = None


@dataclass
class DatasetManifest:
    version: int
    patch_size: int
    image_size: tuple
    images: list
    root: Path = field(default_factory=Path)

    def entry(self, image_id: str) -> ImageEntry:
        for entry in self.images:
            if entry.id == image_id:
                return entry
        raise DataError(f"image id {image_id!r} not in manifest")

    def _check_shape(self, tm: TokenMap, path) -> None:
        w, h = self.image_size
        if (tm.width * self.patch_size, tm.height * self.patch_size) != (w, h):
            raise DataError(
                f"{path}: grid {tm.height}x{tm.width} at patch {self.patch_size} "
                f"does not match image size {w}x{h}"
            )

    def load_token_map(self, entry: ImageEntry) -> TokenMap:
        path = self.root / entry.token_map
        tm = read_token_map(path)
        self._check_shape(tm, path)
        return tm

    def load_quadrants(self, entry: ImageEntry) -> list:
        if entry.quadrant_maps is None:
            raise DataError(f"image {entry.id!r} has no quadrant maps")
        full = self.load_token_map(entry)
        quads = []
        for rel in entry.quadrant_maps:
            path = self.root / rel
            tm = read_token_map(path)
            if (tm.height, tm.width, tm.dim) != (full.height, full.width, full.dim):
                raise DataError(
                    f"{path}: quadrant shape {(tm.height, tm.width, tm.dim)} differs "
                    f"from full map {(full.height, full.width, full.dim)}"
                )
            quads.append(tm)
        return quads


def _parse_entry(raw: dict, index: int) -> ImageEntry:
    try:
        entry = ImageEntry(
            id=str(raw["id"]),
            token_map=str(raw["token_map"]),
            quadrant_maps=raw.get("quadrant_maps"),
            gt_boxes=raw.get("gt_boxes"),
            gt_class=raw.get("gt_class"),
            pred_classes=raw.get("pred_classes"),
        )
    except KeyError as exc:
        raise DataError(f"images[{index}]: missing field {exc}") from exc
    if entry.quadrant_maps is not None and len(entry.quadrant_maps) != 4:
        raise DataError(f"images[{index}]: quadrant_maps must have length 4")
    if entry.pred_classes is not None and len(entry.pred_classes) < 1:
        raise DataError(f"images[{index}]: pred_classes must be non-empty")
    return entry


def load_manifest(source) -> DatasetManifest:
    """Parses a manifest and checks that every referenced file exists.

    Grid-shape consistency against ``image_size`` is deferred to the first
    map load.
    """
    source = Path(source)
    try:
        raw = json.loads(source.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: malformed JSON: {exc}") from exc
    try:
        manifest = DatasetManifest(
            version=int(raw["version"]),
            patch_size=int(raw["patch_size"]),
            image_size=(int(raw["image_size"][0]), int(raw["image_size"][1])),
            images=[_parse_entry(entry, i) for i, entry in enumerate(raw["images"])],
            root=source.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: malformed manifest: {exc}") from exc
    if manifest.version != MANIFEST_VERSION:
        raise DataError(f"{source}: unsupported manifest version {manifest.version}")
    if manifest.patch_size < 1:
        raise DataError(f"{source}: patch_size must be >= 1")
    missing = []
    for entry in manifest.images:
        for rel in [entry.token_map] + (entry.quadrant_maps or []):
            if not (manifest.root / rel).is_file():
                missing.append(str(manifest.root / rel))
        if entry.gt_boxes is not None:
            boxes = [BBox(*box) for box in entry.gt_boxes]
            for box in boxes:
                box.check_bounds(manifest.image_size)
    if missing:
        raise DataError(f"{source}: missing referenced files: " + ", ".join(missing))
    return manifest


def gt_boxes_of(entry: ImageEntry) -> list:
    """Ground-truth boxes of a manifest row as BBox values."""
    if entry.gt_boxes is None:
        return []
    return [BBox(*box) for box in entry.gt_boxes]


def save_manifest(manifest: DatasetManifest, destination) -> None:
    payload = {
        "version": manifest.version,
        "patch_size": manifest.patch_size,
        "image_size": list(manifest.image_size),
        "images": [],
    }
    for entry in manifest.images:
        row = {"id": entry.id, "token_map": entry.token_map}
        if entry.quadrant_maps is not None:
            row["quadrant_maps"] = list(entry.quadrant_maps)
        if entry.gt_boxes is not None:
            row["gt_boxes"] = [list(box) for box in entry.gt_boxes]
        if entry.gt_class is not None:
            row["gt_class"] = entry.gt_class
        if entry.pred_classes is not None:
            row["pred_classes"] = list(entry.pred_classes)
        payload["images"].append(row)
    with open(destination, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
