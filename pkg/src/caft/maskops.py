"""Binary-mask post-processing: Gaussian denoising, connected components,
resolution changes, and bounding-box extraction.

Coordinate conventions: masks are (H, W) token grids indexed [row][col];
boxes are pixel-space, half-open [x_min, x_max) x [y_min, y_max) with x
rightward and y downward. Border handling for all filtering is whole-sample
reflection (the edge cell is not duplicated).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class BBox:
    """Pixel-space box, half-open on both axes."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box {self.as_list()}")

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def check_bounds(self, image_size):
        w, h = image_size
        if self.x_min < 0 or self.y_min < 0 or self.x_max > w or self.y_max > h:
            raise DataError(f"box {self.as_list()} outside image {w}x{h}")


@dataclass
class Mask:
    """Binary (H, W) token-resolution mask."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        self.bits = bits.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())


@dataclass
class SoftMask:
    """Real-valued (H, W) mask with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"soft mask must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise DataError("non-finite value in soft mask")
        if values.min() < -1e-9 or values.max() > 1.0 + 1e-9:
            raise DataError("soft mask values must lie in [0, 1]")
        self.values = np.clip(values, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def as_soft(mask: Mask) -> SoftMask:
    return SoftMask(mask.bits.astype(np.float64))


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """1-D kernel exp(-d^2 / 2 sigma^2) on d in [-radius, radius], sum 1."""
    if sigma <= 0:
        raise DataError("sigma must be > 0")
    if radius < 1:
        raise DataError("radius must be >= 1")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d_reflect(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = (len(kernel) - 1) // 2
    pad = [(r, r) if ax == axis else (0, 0) for ax in range(values.ndim)]
    padded = np.pad(values, pad, mode="reflect")
    out = np.zeros_like(values, dtype=np.float64)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(i, i + values.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_smooth(mask: SoftMask, sigma: float = 1.0, radius: int = 2) -> SoftMask:
    """Separable truncated-Gaussian smoothing with reflected borders."""
    kernel = gaussian_kernel(sigma, radius)
    smoothed = _correlate1d_reflect(mask.values, kernel, axis=0)
    smoothed = _correlate1d_reflect(smoothed, kernel, axis=1)
    return SoftMask(np.clip(smoothed, 0.0, 1.0))


def binarize(mask: SoftMask, threshold: float) -> Mask:
    """1 where value >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError("threshold must lie in [0, 1]")
    return Mask((mask.values >= threshold).astype(np.uint8))


def denoise(mask: Mask, sigma: float = 1.0, radius: int = 2, threshold: float = 0.5) -> Mask:
    """Smooth then re-binarize; kills isolated cells, fills pinholes."""
    return binarize(gaussian_smooth(as_soft(mask), sigma, radius), threshold)


@dataclass
class Component:
    """One connected foreground region; cells are row-major sorted."""

    cells: list
    size: int

    @property
    def bounds(self):
        rows = [r for r, _ in self.cells]
        cols = [c for _, c in self.cells]
        return min(rows), min(cols), max(rows), max(cols)


_NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_NEIGHBORS_8 = _NEIGHBORS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def connected_components(mask: Mask, connectivity: int = 8) -> list:
    """Maximal connected foreground regions, largest first.

    Ties in size break by the row-major position of the first cell.
    """
    if connectivity not in (4, 8):
        raise DataError("connectivity must be 4 or 8")
    offsets = _NEIGHBORS_4 if connectivity == 4 else _NEIGHBORS_8
    bits = mask.bits
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    components = []
    for r0 in range(h):
        for c0 in range(w):
            if not bits[r0, c0] or seen[r0, c0]:
                continue
            stack = [(r0, c0)]
            seen[r0, c0] = True
            cells = []
            while stack:
                r, c = stack.pop()
                cells.append((r, c))
                for dr, dc in offsets:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and bits[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            cells.sort()
            components.append(Component(cells=cells, size=len(cells)))
    components.sort(key=lambda comp: (-comp.size, comp.cells[0]))
    return components


def mask_to_box(mask: Mask, patch_size: int, image_size, policy: str = "largest") -> BBox:
    """Tight pixel box around the foreground.

    ``largest`` bounds the biggest 8-connected component, ``all`` bounds every
    foreground cell. An empty mask falls back to the full-image box so a
    prediction always exists; callers wanting to count fallbacks should test
    emptiness first.
    """
    w, h = image_size
    if (mask.width * patch_size, mask.height * patch_size) != (w, h):
        raise DataError(
            f"image size {w}x{h} inconsistent with {mask.width}x{mask.height} cells at patch {patch_size}"
        )
    if policy not in ("largest", "all"):
        raise DataError(f"unknown box policy {policy!r}")
    if mask.foreground_count == 0:
        return BBox(0, 0, w, h)
    if policy == "largest":
        r_min, c_min, r_max, c_max = connected_components(mask, 8)[0].bounds
    else:
        rows, cols = np.nonzero(mask.bits)
        r_min, c_min, r_max, c_max = rows.min(), cols.min(), rows.max(), cols.max()
    return BBox(
        int(c_min) * patch_size,
        int(r_min) * patch_size,
        (int(c_max) + 1) * patch_size,
        (int(r_max) + 1) * patch_size,
    )


def upsample_mask(mask: Mask, factor: int) -> Mask:
    """Nearest-neighbor block replication."""
    if factor < 1:
        raise DataError("factor must be >= 1")
    return Mask(np.repeat(np.repeat(mask.bits, factor, axis=0), factor, axis=1))


def downsample_soft(mask: Mask, factor: int) -> SoftMask:
    """Block mean over factor x factor cells; dimensions must divide."""
    if factor < 1:
        raise DataError("factor must be >= 1")
    h, w = mask.bits.shape
    if h % factor or w % factor:
        raise DataError(f"mask {h}x{w} not divisible by factor {factor}")
    blocks = mask.bits.astype(np.float64).reshape(h // factor, factor, w // factor, factor)
    return SoftMask(blocks.mean(axis=(1, 3)))


def write_pgm(mask: Mask, path) -> None:
    """Binary PGM (P5, maxval 255) with foreground as 255."""
    payload = (mask.bits * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def read_pgm(path) -> Mask:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a P5 PGM file")
    try:
        w, h = (int(tok) for tok in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    raw = parts[3]
    if len(raw) != w * h:
        raise DataError(f"{path}: PGM payload size mismatch")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return Mask((pixels > maxval // 2).astype(np.uint8))


def write_bits(mask: Mask, path) -> None:
    """Raw row-major bitset (MSB first), no header."""
    with open(path, "wb") as fh:
        fh.write(np.packbits(mask.bits.ravel()).tobytes())
