"""Synthetic token maps with planted ground truth, plus the brute-force
oracles (exhaustive k-means, direct convolution, finite differences) used to
anchor the test suite.

Each synthetic image plants a rectangle of foreground cells; tokens are
isotropic Gaussian draws around a per-class mean, the class token is a
foreground draw, and a configurable fraction of cells is resampled from the
wrong class to mimic background noise. The single sampled layer is replicated
to three layers with a zero positional grid so the merge stage is exercised
while ground truth stays exact. Quadrant maps are block restrictions of the
full grid re-gridded to full size by nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import atf as atf_mod
from .errors import DataError
from .maskops import BBox, Mask, mask_to_box, write_pgm
from .token_io import (
    MANIFEST_VERSION,
    DatasetManifest,
    ImageEntry,
    TokenMap,
    save_manifest,
    write_token_map,
)

DEFAULT_PATCH_SIZE = 16


@dataclass
class SynthConfig:
    height: int = 24
    width: int = 24
    dim: int = 16
    n_images: int = 200
    rect_fraction: tuple = (0.1, 0.4)
    separation: float = 8.0
    noise_flip_rate: float = 0.02
    seed: int = 0
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if self.height < 2 or self.width < 2 or self.height % 2 or self.width % 2:
            raise DataError("grid sides must be even and >= 2 (quadrant construction)")
        if self.dim < 1 or self.n_images < 0:
            raise DataError("dim must be >= 1 and n_images >= 0")
        lo, hi = self.rect_fraction
        if not (0 < lo <= hi <= 1):
            raise DataError(f"rect_fraction must satisfy 0 < lo <= hi <= 1, got {self.rect_fraction}")
        if self.separation <= 0:
            raise DataError("separation must be > 0")
        if not 0 <= self.noise_flip_rate < 0.5:
            raise DataError("noise_flip_rate must lie in [0, 0.5)")


@dataclass
class SynthImage:
    image_id: str
    token_map: TokenMap
    planted_mask: Mask
    planted_box: BBox
    quadrants: list
    fg_mean: np.ndarray
    bg_mean: np.ndarray


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def class_means(cfg: SynthConfig):
    """Dataset-level foreground/background token means.

    One pair per dataset: a shared pair keeps the pooled token-classification
    problem linearly separable, mirroring the consistent foreground semantics
    the filter relies on with real backbone tokens.
    """
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xC1A55,)))
    )
    sigma = 1.0
    bg_mean = rng.normal(0.0, 1.0, cfg.dim)
    direction = rng.normal(0.0, 1.0, cfg.dim)
    direction /= np.linalg.norm(direction)
    fg_mean = bg_mean + cfg.separation * sigma * direction
    return fg_mean, bg_mean


def _sample_rectangle(cfg: SynthConfig, rng: np.random.Generator):
    total = cfg.height * cfg.width
    lo, hi = cfg.rect_fraction
    for _ in range(200):
        target = rng.uniform(lo, hi) * total
        aspect = rng.uniform(0.5, 2.0)
        h = int(np.clip(round(np.sqrt(target * aspect)), 1, cfg.height))
        w = int(np.clip(round(target / h), 1, cfg.width))
        if lo * total <= h * w <= hi * total:
            r0 = int(rng.integers(0, cfg.height - h + 1))
            c0 = int(rng.integers(0, cfg.width - w + 1))
            return r0, c0, h, w
    raise DataError(f"no integer rectangle fits fraction range {cfg.rect_fraction}")


def _replicate_layers(grid: np.ndarray, class_token: np.ndarray) -> TokenMap:
    h, w, d = grid.shape
    return TokenMap(
        grid=np.repeat(grid[None], 3, axis=0),
        class_tokens=np.repeat(class_token[None], 3, axis=0),
        pos_grid=np.zeros((h, w, d), dtype=np.float32),
        pos_class=np.zeros(d, dtype=np.float32),
    )


def _quadrant_maps(grid: np.ndarray, class_token: np.ndarray) -> list:
    h, w, _ = grid.shape
    quads = []
    for r0, c0 in ((0, 0), (0, w // 2), (h // 2, 0), (h // 2, w // 2)):
        block = grid[r0 : r0 + h // 2, c0 : c0 + w // 2]
        regridded = np.repeat(np.repeat(block, 2, axis=0), 2, axis=1)
        quads.append(_replicate_layers(regridded, class_token))
    return quads


def quadrant_truth_masks(planted: Mask) -> list:
    """Ground-truth masks of the four quadrant maps: block restrictions of
    the planted mask re-gridded by nearest neighbor, row-major order."""
    h, w = planted.bits.shape
    masks = []
    for r0, c0 in ((0, 0), (0, w // 2), (h // 2, 0), (h // 2, w // 2)):
        block = planted.bits[r0 : r0 + h // 2, c0 : c0 + w // 2]
        masks.append(Mask(np.repeat(np.repeat(block, 2, axis=0), 2, axis=1)))
    return masks


def generate_image(cfg: SynthConfig, index: int, means=None) -> SynthImage:
    rng = _image_rng(cfg.seed, index)
    r0, c0, rect_h, rect_w = _sample_rectangle(cfg, rng)
    mask_bits = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    mask_bits[r0 : r0 + rect_h, c0 : c0 + rect_w] = 1
    planted = Mask(mask_bits)

    sigma = 1.0
    fg_mean, bg_mean = means if means is not None else class_means(cfg)

    means = np.where(mask_bits[:, :, None] == 1, fg_mean, bg_mean)
    grid = (means + rng.normal(0.0, sigma, (cfg.height, cfg.width, cfg.dim))).astype(np.float32)
    n_cells = cfg.height * cfg.width
    n_flips = int(round(cfg.noise_flip_rate * n_cells))
    if n_flips:
        flat = rng.choice(n_cells, size=n_flips, replace=False)
        rows, cols = np.unravel_index(flat, (cfg.height, cfg.width))
        wrong = np.where(mask_bits[rows, cols, None] == 1, bg_mean, fg_mean)
        grid[rows, cols] = (wrong + rng.normal(0.0, sigma, (n_flips, cfg.dim))).astype(np.float32)
    class_token = (fg_mean + rng.normal(0.0, sigma, cfg.dim)).astype(np.float32)

    image_size = (cfg.width * cfg.patch_size, cfg.height * cfg.patch_size)
    planted_box = mask_to_box(planted, cfg.patch_size, image_size, policy="all")
    return SynthImage(
        image_id=f"img{index:04d}",
        token_map=_replicate_layers(grid, class_token),
        planted_mask=planted,
        planted_box=planted_box,
        quadrants=_quadrant_maps(grid, class_token),
        fg_mean=fg_mean,
        bg_mean=bg_mean,
    )


def generate_synthetic(cfg: SynthConfig) -> list:
    """All images of the configured dataset, deterministic per (seed, index)."""
    means = class_means(cfg)
    return [generate_image(cfg, i, means) for i in range(cfg.n_images)]


def write_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Writes token maps, quadrant maps, planted masks, and the manifest.

    Ground-truth boxes come from the planted masks; every image gets class 0
    with five distinct predicted classes led by the correct one, so the
    classification-conditioned metrics are exercised end to end.
    """
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    (out_dir / "planted").mkdir(parents=True, exist_ok=True)
    means = class_means(cfg)
    entries = []
    for index in range(cfg.n_images):
        image = generate_image(cfg, index, means)
        map_rel = f"maps/{image.image_id}.ctm"
        write_token_map(image.token_map, out_dir / map_rel)
        quad_rels = []
        for qi, quad in enumerate(image.quadrants):
            rel = f"maps/{image.image_id}.q{qi}.ctm"
            write_token_map(quad, out_dir / rel)
            quad_rels.append(rel)
        write_pgm(image.planted_mask, out_dir / "planted" / f"{image.image_id}.pgm")
        entries.append(
            ImageEntry(
                id=image.image_id,
                token_map=map_rel,
                quadrant_maps=quad_rels,
                gt_boxes=[image.planted_box.as_list()],
                gt_class=0,
                pred_classes=[0, 1, 2, 3, 4],
            )
        )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        patch_size=cfg.patch_size,
        image_size=(cfg.width * cfg.patch_size, cfg.height * cfg.patch_size),
        images=entries,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def make_separator_model(fg_mean, bg_mean, n_hidden_blocks: int = 1) -> atf_mod.AtfModel:
    """Hand-built filter that classifies tokens by nearest class mean.

    Each hidden block is made an exact shift: identity convolution, running
    variance of 1 - eps so normalization divides by exactly 1, and a large
    positive beta that keeps every activation in the linear ReLU range. The
    head then encodes the two-mean discriminant
    2 x . (mu_f - mu_b) + |mu_b|^2 - |mu_f|^2 against a zero background
    logit. Used as the oracle-perfect predictor on synthetic data.
    """
    fg_mean = np.asarray(fg_mean, dtype=np.float64)
    bg_mean = np.asarray(bg_mean, dtype=np.float64)
    d = fg_mean.size
    config = atf_mod.AtfConfig(dim=d, n_hidden_blocks=n_hidden_blocks, first_kernel=1, seed=0)
    model = atf_mod.init_atf(config, dtype=np.float64)
    shift = 1e4
    for block in model.blocks:
        block.weight = np.eye(d, dtype=np.float64)[:, :, None, None]
        block.bias = np.zeros(d)
        block.gamma = np.ones(d)
        block.beta = np.full(d, shift)
        block.run_mean = np.zeros(d)
        block.run_var = np.full(d, 1.0 - block.eps)
    w = fg_mean - bg_mean
    model.head_weight = np.stack([np.zeros(d), 2.0 * w])[:, :, None, None]
    total_shift = shift * n_hidden_blocks
    bias_fg = float(bg_mean @ bg_mean - fg_mean @ fg_mean) - 2.0 * total_shift * float(w.sum())
    model.head_bias = np.array([0.0, bias_fg])
    return model


def _rgs_partitions(n: int, k_max: int) -> np.ndarray:
    """All restricted-growth label strings over at most k_max labels."""
    rows = []
    labels = np.zeros(n, dtype=np.int8)

    def grow(i: int, used: int):
        if i == n:
            rows.append(labels.copy())
            return
        for value in range(min(used + 1, k_max)):
            labels[i] = value
            grow(i + 1, max(used, value + 1))

    grow(1, 1)  # first point is always label 0
    return np.stack(rows)


def exact_kmeans_oracle(points, k: int):
    """Globally optimal k-means by partition enumeration.

    Returns (inertia, labels) minimizing the sum of squared distances to
    group means over all partitions into at most k groups. Bounded to
    N <= 12, k <= 3.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n > 12 or k > 3:
        raise DataError(f"oracle bounds exceeded: N={n} (max 12), k={k} (max 3)")
    if not 1 <= k <= n:
        raise DataError(f"need N >= k >= 1, got N={n}, k={k}")
    partitions = _rgs_partitions(n, k)
    onehot = np.eye(k, dtype=np.float64)[partitions]  # (P, N, k)
    counts = onehot.sum(axis=1)  # (P, k)
    sums = np.einsum("pnk,nd->pkd", onehot, pts)
    safe = np.maximum(counts, 1.0)
    means_sq = (sums**2).sum(axis=2) / safe
    total_sq = float((pts**2).sum())
    inertias = total_sq - means_sq.sum(axis=1)
    best = int(np.argmin(inertias))
    return float(inertias[best]), partitions[best].astype(np.int64)


def _reflect(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * n - 2
    i %= period
    if i < 0:
        i += period
    return i if i < n else period - i


def direct_convolution_oracle(values, kernel) -> np.ndarray:
    """Naive nested-loop 2-D convolution with reflected borders.

    Independent of the separable filter implementation: its own index
    reflection, true convolution (kernel flipped). Symmetric kernels make the
    flip immaterial.
    """
    values = np.asarray(values, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DataError("kernel dimensions must be odd")
    rh, rw = kh // 2, kw // 2
    h, w = values.shape
    out = np.zeros_like(values)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for dr in range(-rh, rh + 1):
                for dc in range(-rw, rw + 1):
                    src = values[_reflect(r - dr, h), _reflect(c - dc, w)]
                    acc += kernel[dr + rh, dc + rw] * src
            out[r, c] = acc
    return out


def finite_difference_grad(model, grids, targets, epsilon: float) -> np.ndarray:
    """Central-difference gradient of the training loss.

    Perturbations happen in the model's storage precision; each loss is then
    evaluated in float64 at those exact points, and the divisor is the
    actually realized parameter step. Batch norm runs in train mode on the
    fixed batch throughout.
    """
    base = atf_mod.get_param_vector(model)
    work = model.copy()
    grad = np.zeros(base.size, dtype=np.float64)
    for i in range(base.size):
        plus = base.copy()
        plus[i] = base[i] + epsilon
        atf_mod.set_param_vector(work, plus)
        realized_plus = atf_mod.get_param_vector(work)[i]
        loss_plus = atf_mod.atf_loss(work.astype(np.float64), grids, targets, train=True)
        minus = base.copy()
        minus[i] = base[i] - epsilon
        atf_mod.set_param_vector(work, minus)
        realized_minus = atf_mod.get_param_vector(work)[i]
        loss_minus = atf_mod.atf_loss(work.astype(np.float64), grids, targets, train=True)
        step = np.float64(realized_plus) - np.float64(realized_minus)
        grad[i] = (loss_plus - loss_minus) / step
    atf_mod.set_param_vector(work, base)
    return grad
