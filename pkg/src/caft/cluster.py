"""k-means over merged tokens, class-token foreground selection, and
clustering-quality diagnostics.

The class token is clustered jointly with the grid tokens as one extra point;
the cluster it lands in is the foreground. Cluster ids are canonicalized by
first-member index so results are reproducible across runs and platforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backend import accumulate_centers, assign_labels
from .errors import DataError
from .maskops import Mask
from .merge import MergedMap

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-4


@dataclass
class KMeansResult:
    """Flat-point clustering with canonical labels."""

    labels: np.ndarray
    centers: np.ndarray
    k: int
    inertia: float
    iterations: int
    seed: int


@dataclass
class ClusterResult:
    """Token-grid clustering; the class token was the extra (last) point."""

    assignments: np.ndarray
    class_token_cluster: int
    centers: np.ndarray
    k: int
    inertia: float
    iterations: int
    seed: int


@dataclass
class ClusterMetrics:
    """Separation diagnostics for one clustering.

    ``d_ic``: mean distance of object-cluster members to their center.
    ``d_r``: max such distance (cluster radius).
    ``d_cc``: mean distance from the object center to the k cluster centers,
    divided by k - 1 (the object's own zero term is included in the sum);
    absent for k = 1, as are the ratios and the variance-ratio score.
    ``ch_score``: between/within dispersion ratio scaled by (n - k)/(k - 1)
    (Calinski-Harabasz); infinite when the within-cluster dispersion is zero.
    """

    d_ic: float
    d_r: float
    d_cc: float | None
    ratio_ic: float | None
    ratio_r: float | None
    ch_score: float | None

    def to_dict(self) -> dict:
        return {
            "d_ic": self.d_ic,
            "d_r": self.d_r,
            "d_cc": self.d_cc,
            "ratio_ic": self.ratio_ic,
            "ratio_r": self.ratio_r,
            "ch_score": self.ch_score,
        }


def _restart_rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(restart,)))
    )


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    if k == 1:
        return centers
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a center
        else:
            threshold = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(closest), threshold, side="right")), n - 1)
        centers[j] = points[idx]
        np.minimum(closest, ((points - centers[j]) ** 2).sum(axis=1), out=closest)
    return centers


def _repair_empty(centers, points, sqdist, counts) -> None:
    """Re-seeds each empty cluster to the point farthest from its center."""
    empty = np.flatnonzero(counts == 0)
    if not empty.size:
        return
    order = np.argsort(-sqdist, kind="stable")
    ptr = 0
    for cluster in empty:
        if ptr >= order.size or sqdist[order[ptr]] <= 0.0:
            break  # fully degenerate, keep duplicate centers
        centers[cluster] = points[order[ptr]]
        ptr += 1


def _lloyd(points, k, centers, max_iter, tol):
    labels, sqdist = assign_labels(points, centers)
    inertia = float(sqdist.sum())
    iterations = 0
    for it in range(max_iter):
        iterations = it + 1
        sums, counts = accumulate_centers(points, labels, k)
        nonzero = counts > 0
        new_centers = centers.copy()
        new_centers[nonzero] = sums[nonzero] / counts[nonzero, None]
        _repair_empty(new_centers, points, sqdist, counts)
        centers = new_centers
        new_labels, sqdist = assign_labels(points, centers)
        new_inertia = float(sqdist.sum())
        stable = np.array_equal(new_labels, labels)
        converged = (inertia - new_inertia) <= tol * inertia
        labels, inertia = new_labels, new_inertia
        if stable or converged:
            break
    return labels, centers, inertia, iterations


def _canonicalize(labels, centers, k):
    uniq, first = np.unique(labels, return_index=True)
    order = uniq[np.argsort(first)].tolist()
    perm = order + [c for c in range(k) if c not in set(order)]
    lut = np.empty(k, dtype=np.int64)
    lut[perm] = np.arange(k)
    return lut[labels], centers[np.asarray(perm)]


def kmeans(
    points,
    k: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding, best of ``restarts`` runs.

    Deterministic for fixed (points, k, seed, restarts); ties between
    restarts resolve to the lowest restart index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError(f"points must be 2-D, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("non-finite value in points")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"need N >= k >= 1, got N={n}, k={k}")
    if restarts < 1 or max_iter < 1 or tol < 0:
        raise DataError("need restarts >= 1, max_iter >= 1, tol >= 0")

    best = None
    for restart in range(restarts):
        rng = _restart_rng(seed, restart)
        centers = _kmeanspp_init(pts, k, rng)
        candidate = _lloyd(pts, k, centers, max_iter, tol)
        if best is None or candidate[2] < best[2]:
            best = candidate
    labels, centers, inertia, iterations = best
    labels, centers = _canonicalize(labels, centers, k)
    return KMeansResult(
        labels=labels, centers=centers, k=k, inertia=inertia, iterations=iterations, seed=seed
    )


def cluster_tokens(
    mmap: MergedMap,
    k: int = DEFAULT_K,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> ClusterResult:
    """Clusters the grid tokens plus the class token as one extra point."""
    points = np.vstack([mmap.tokens(), mmap.class_token[None, :]])
    core = kmeans(points, k, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol)
    assignments = core.labels[:-1].reshape(mmap.height, mmap.width)
    return ClusterResult(
        assignments=assignments,
        class_token_cluster=int(core.labels[-1]),
        centers=core.centers,
        k=core.k,
        inertia=core.inertia,
        iterations=core.iterations,
        seed=core.seed,
    )


def foreground_mask(result: ClusterResult) -> Mask:
    """1 where the grid assignment matches the class token's cluster."""
    return Mask((result.assignments == result.class_token_cluster).astype(np.uint8))


def clustering_metrics(points, result: KMeansResult, object_cluster: int) -> ClusterMetrics:
    """Separation diagnostics for the given clustering and object cluster.

    Centers are taken from ``result`` as-is; after converged k-means they are
    the cluster means.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(result.labels)
    centers = np.asarray(result.centers, dtype=np.float64)
    k = result.k
    members = pts[labels == object_cluster]
    if members.shape[0] == 0:
        raise DataError(f"empty object cluster {object_cluster}")

    member_dists = np.linalg.norm(members - centers[object_cluster], axis=1)
    d_ic = float(member_dists.mean())
    d_r = float(member_dists.max())

    if k == 1:
        d_cc = ratio_ic = ratio_r = ch_score = None
    else:
        center_dists = np.linalg.norm(centers - centers[object_cluster], axis=1)
        d_cc = float(center_dists.sum() / (k - 1))
        ratio_ic = d_cc / d_ic if d_ic > 0 else float("inf")
        ratio_r = d_cc / d_r if d_r > 0 else float("inf")
        within = float(((pts - centers[labels]) ** 2).sum())
        counts = np.bincount(labels, minlength=k)
        grand_mean = pts.mean(axis=0)
        between = float((counts * ((centers - grand_mean) ** 2).sum(axis=1)).sum())
        n = pts.shape[0]
        if within > 0:
            ch_score = (between / within) * ((n - k) / (k - 1))
        else:
            ch_score = float("inf")
    return ClusterMetrics(
        d_ic=d_ic, d_r=d_r, d_cc=d_cc, ratio_ic=ratio_ic, ratio_r=ratio_r, ch_score=ch_score
    )


def class_token_affinity(mmap: MergedMap, result: ClusterResult) -> float:
    """Distance from the merged class token to the center of its own cluster."""
    center = result.centers[result.class_token_cluster]
    return float(np.linalg.norm(mmap.class_token - center))


def _unit_rows(tokens: np.ndarray):
    norms = np.linalg.norm(tokens, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d zero-norm tokens; their similarities are defined as 0", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return tokens / safe[:, None], zero


def similarity_matrix(mmap: MergedMap) -> np.ndarray:
    """Cosine similarity between all pairs of grid tokens, row-major order.

    Symmetric with unit diagonal; rows/columns of zero-norm tokens are 0.
    """
    units, zero = _unit_rows(mmap.tokens())
    sim = units @ units.T
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, np.where(zero, 0.0, 1.0))
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def similarity_curve(mmap: MergedMap, anchor) -> np.ndarray:
    """One similarity-matrix row for the anchor cell (row, col)."""
    r, c = anchor
    if not (0 <= r < mmap.height and 0 <= c < mmap.width):
        raise DataError(f"anchor {anchor} outside {mmap.height}x{mmap.width} grid")
    units, zero = _unit_rows(mmap.tokens())
    idx = r * mmap.width + c
    curve = units @ units[idx]
    curve[zero] = 0.0
    curve[idx] = 0.0 if zero[idx] else 1.0
    if zero[idx]:
        curve[:] = 0.0
    return curve
