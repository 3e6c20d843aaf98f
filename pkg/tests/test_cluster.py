import logging

import numpy as np
import pytest

from caft.cluster import (
    KMeansResult,
    class_token_affinity,
    cluster_tokens,
    clustering_metrics,
    foreground_mask,
    kmeans,
    similarity_curve,
    similarity_matrix,
)
from caft.errors import DataError
from caft.merge import MergedMap
from caft.synth import exact_kmeans_oracle


def _blob_map(h=8, w=8, d=4, rect=(1, 1, 4, 4), separation=9.0, seed=0):
    """Two well-separated Gaussian blobs on a grid, class token at the
    foreground mean; returns (map, planted bits)."""
    rng = np.random.default_rng(seed)
    bg = rng.normal(0, 1, d)
    direction = rng.normal(0, 1, d)
    fg = bg + separation * direction / np.linalg.norm(direction)
    bits = np.zeros((h, w), dtype=np.uint8)
    r0, c0, rh, rw = rect
    bits[r0 : r0 + rh, c0 : c0 + rw] = 1
    grid = np.where(bits[:, :, None] == 1, fg, bg) + rng.normal(0, 1, (h, w, d))
    return MergedMap(grid=grid, class_token=fg.copy()), bits


class TestKMeans:
    def test_n_equals_k_distinct_points(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        result = kmeans(pts, 3, seed=0, restarts=5)
        assert result.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(result.labels.tolist()) == [0, 1, 2]

    def test_two_pair_instance(self):
        pts = np.array([[0.0], [1.0], [10.0], [11.0]])
        result = kmeans(pts, 2, seed=0, restarts=5)
        assert result.labels.tolist() == [0, 0, 1, 1]
        np.testing.assert_allclose(np.sort(result.centers.ravel()), [0.5, 10.5])
        assert result.inertia == pytest.approx(1.0)

    def test_duplicate_points_k1(self):
        result = kmeans(np.array([[5.0], [5.0], [5.0]]), 1, seed=0)
        assert result.centers[0, 0] == pytest.approx(5.0)
        assert result.inertia == pytest.approx(0.0)

    def test_degenerate_identical_points_k3(self):
        pts = np.full((10, 2), 3.0)
        result = kmeans(pts, 3, seed=0, restarts=3)
        assert (result.labels == result.labels[0]).all()
        assert result.inertia == pytest.approx(0.0)
        np.testing.assert_allclose(result.centers[result.labels[0]], [3.0, 3.0])

    def test_determinism(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(0, 1, (40, 3))
        a = kmeans(pts, 3, seed=42, restarts=7)
        b = kmeans(pts, 3, seed=42, restarts=7)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centers, b.centers)
        assert a.inertia == b.inertia and a.iterations == b.iterations

    def test_permutation_equivariance_as_partition(self):
        rng = np.random.default_rng(2)
        blob_a = rng.normal(0, 0.5, (15, 2))
        blob_b = rng.normal(20, 0.5, (12, 2))
        pts = np.vstack([blob_a, blob_b])
        perm = rng.permutation(len(pts))
        base = kmeans(pts, 2, seed=0, restarts=10)
        permuted = kmeans(pts[perm], 2, seed=0, restarts=10)
        # compare partitions, not labels
        def partition(labels):
            groups = {}
            for i, l in enumerate(labels):
                groups.setdefault(int(l), set()).add(i)
            return sorted(frozenset(g) for g in groups.values())

        forward = {int(p): i for i, p in enumerate(perm)}
        mapped = [None] * len(pts)
        for new_pos, label in enumerate(permuted.labels):
            mapped[int(perm[new_pos])] = int(label)
        assert partition(base.labels) == partition(mapped)

    def test_canonical_label_order(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(0, 1, (30, 2))
        result = kmeans(pts, 3, seed=9, restarts=4)
        first_seen = []
        for label in result.labels:
            if label not in first_seen:
                first_seen.append(int(label))
        assert first_seen == sorted(first_seen)

    def test_matches_enumeration_on_small_instances(self):
        rng = np.random.default_rng(4)
        hits = 0
        for trial in range(15):
            n = int(rng.integers(4, 9))
            d = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            k = min(k, n)
            pts = rng.normal(0, 1, (n, d))
            optimal, _ = exact_kmeans_oracle(pts, k)
            got = kmeans(pts, k, seed=trial, restarts=20).inertia
            assert got >= optimal - 1e-9 - 1e-9 * abs(optimal)
            if got <= optimal * (1 + 1e-9) + 1e-12:
                hits += 1
        assert hits >= 14

    def test_input_validation(self):
        with pytest.raises(DataError, match="N >= k"):
            kmeans(np.zeros((2, 2)), 3)
        with pytest.raises(DataError, match="non-finite"):
            kmeans(np.array([[np.nan]]), 1)


class TestClusterTokens:
    def test_class_token_lands_in_foreground_cluster(self):
        mmap, bits = _blob_map()
        result = cluster_tokens(mmap, k=2, seed=0)
        mask = foreground_mask(result)
        np.testing.assert_array_equal(mask.bits, bits)

    def test_constant_grid_degenerate(self):
        mmap = MergedMap(grid=np.ones((4, 4, 2)), class_token=np.ones(2))
        result = cluster_tokens(mmap, k=3, seed=0)
        assert (result.assignments == result.class_token_cluster).all()

    def test_paper_scale_shapes_accepted(self):
        rng = np.random.default_rng(0)
        mmap = MergedMap(
            grid=rng.normal(0, 1, (24, 24, 768)), class_token=rng.normal(0, 1, 768)
        )
        result = cluster_tokens(mmap, k=3, seed=0, restarts=2, max_iter=50)
        assert result.assignments.shape == (24, 24)
        assert 0 <= result.class_token_cluster < 3

    def test_foreground_cardinality(self):
        mmap, _ = _blob_map(seed=5)
        result = cluster_tokens(mmap, k=3, seed=1)
        mask = foreground_mask(result)
        assert mask.foreground_count == int(
            (result.assignments == result.class_token_cluster).sum()
        )


class TestMetrics:
    def test_symmetric_pair(self):
        pts = np.array([[0.0], [2.0]])
        result = KMeansResult(
            labels=np.array([0, 0]), centers=np.array([[1.0]]), k=1, inertia=2.0,
            iterations=1, seed=0,
        )
        metrics = clustering_metrics(pts, result, 0)
        assert metrics.d_ic == pytest.approx(1.0)
        assert metrics.d_r == pytest.approx(1.0)
        assert metrics.d_cc is None and metrics.ch_score is None

    def test_dcc_three_centers(self):
        pts = np.array([[0.0], [3.0], [6.0]])
        result = KMeansResult(
            labels=np.array([0, 1, 2]),
            centers=np.array([[0.0], [3.0], [6.0]]),
            k=3, inertia=0.0, iterations=1, seed=0,
        )
        metrics = clustering_metrics(pts, result, 0)
        assert metrics.d_cc == pytest.approx((0 + 3 + 6) / 2)

    def test_ratio_fixture_from_reported_values(self):
        # object members at distance 9.29 from their center, other center 16.58 away
        pts = np.array([[-9.29], [9.29], [16.58]])
        result = KMeansResult(
            labels=np.array([0, 0, 1]),
            centers=np.array([[0.0], [16.58]]),
            k=2, inertia=0.0, iterations=1, seed=0,
        )
        metrics = clustering_metrics(pts, result, 0)
        assert metrics.d_ic == pytest.approx(9.29)
        assert metrics.d_cc == pytest.approx(16.58)
        assert metrics.ratio_ic == pytest.approx(1.78, abs=5e-3)

    def test_variance_ratio_fixture(self):
        pts = np.array([[0.0], [2.0], [10.0], [12.0]])
        result = KMeansResult(
            labels=np.array([0, 0, 1, 1]),
            centers=np.array([[1.0], [11.0]]),
            k=2, inertia=4.0, iterations=1, seed=0,
        )
        metrics = clustering_metrics(pts, result, 0)
        # W = 4, B = 100, score = (100/4) * ((4-2)/(2-1)) = 50
        assert metrics.ch_score == pytest.approx(50.0)

    def test_matches_sklearn_variance_ratio(self):
        sklearn_metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(7)
        pts = rng.normal(0, 1, (50, 3))
        result = kmeans(pts, 3, seed=0, restarts=5)
        ours = clustering_metrics(pts, result, 0).ch_score
        theirs = sklearn_metrics.calinski_harabasz_score(pts, result.labels)
        assert ours == pytest.approx(theirs, rel=1e-9)

    def test_radius_bounds_mean(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            pts = rng.normal(0, 1, (30, 2))
            result = kmeans(pts, 3, seed=trial)
            metrics = clustering_metrics(pts, result, int(result.labels[0]))
            assert metrics.d_r >= metrics.d_ic >= 0

    def test_empty_object_cluster_rejected(self):
        pts = np.array([[0.0], [1.0]])
        result = KMeansResult(
            labels=np.array([0, 0]), centers=np.array([[0.5], [9.0]]), k=2,
            inertia=0.5, iterations=1, seed=0,
        )
        with pytest.raises(DataError, match="empty object cluster"):
            clustering_metrics(pts, result, 1)

    def test_zero_dispersion_score_infinite(self):
        pts = np.array([[0.0], [0.0], [5.0], [5.0]])
        result = KMeansResult(
            labels=np.array([0, 0, 1, 1]),
            centers=np.array([[0.0], [5.0]]),
            k=2, inertia=0.0, iterations=1, seed=0,
        )
        assert clustering_metrics(pts, result, 0).ch_score == float("inf")


class TestAffinityAndSimilarity:
    def test_affinity_zero_at_center(self):
        mmap = MergedMap(grid=np.zeros((2, 2, 1)), class_token=np.zeros(1))
        result = cluster_tokens(mmap, k=1, seed=0)
        assert class_token_affinity(mmap, result) == pytest.approx(0.0)

    def test_affinity_direct_arithmetic(self):
        mmap = MergedMap(grid=np.zeros((1, 1, 1)), class_token=np.array([3.0]))
        result = KMeansResult(
            labels=np.array([0, 0]), centers=np.array([[1.0]]), k=1, inertia=0.0,
            iterations=1, seed=0,
        )
        from caft.cluster import ClusterResult

        cres = ClusterResult(
            assignments=np.zeros((1, 1), dtype=np.int64), class_token_cluster=0,
            centers=result.centers, k=1, inertia=0.0, iterations=1, seed=0,
        )
        assert class_token_affinity(mmap, cres) == pytest.approx(2.0)

    def test_affinity_bounded_by_radius(self):
        mmap, _ = _blob_map(seed=11)
        result = cluster_tokens(mmap, k=3, seed=2)
        points = np.vstack([mmap.tokens(), mmap.class_token[None, :]])
        labels = np.concatenate(
            [result.assignments.ravel(), [result.class_token_cluster]]
        )
        core = KMeansResult(
            labels=labels, centers=result.centers, k=result.k,
            inertia=result.inertia, iterations=result.iterations, seed=result.seed,
        )
        metrics = clustering_metrics(points, core, result.class_token_cluster)
        assert class_token_affinity(mmap, result) <= metrics.d_r + 1e-12

    def test_matrix_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(12)
        mmap = MergedMap(grid=rng.normal(0, 1, (4, 5, 3)), class_token=rng.normal(0, 1, 3))
        sim = similarity_matrix(mmap)
        assert sim.shape == (20, 20)
        np.testing.assert_allclose(np.diag(sim), 1.0)
        np.testing.assert_allclose(sim, sim.T)

    def test_positive_scaling_gives_unit_similarity(self):
        grid = np.zeros((1, 2, 2))
        grid[0, 0] = [1.0, 2.0]
        grid[0, 1] = [3.0, 6.0]
        mmap = MergedMap(grid=grid, class_token=np.zeros(2))
        sim = similarity_matrix(mmap)
        assert sim[0, 1] == pytest.approx(1.0)

    def test_orthogonal_tokens(self):
        grid = np.zeros((1, 2, 2))
        grid[0, 0] = [1.0, 0.0]
        grid[0, 1] = [0.0, 1.0]
        mmap = MergedMap(grid=grid, class_token=np.zeros(2))
        assert similarity_matrix(mmap)[0, 1] == pytest.approx(0.0)

    def test_zero_norm_token_flagged(self, caplog):
        grid = np.zeros((1, 2, 2))
        grid[0, 1] = [1.0, 1.0]
        mmap = MergedMap(grid=grid, class_token=np.zeros(2))
        with caplog.at_level(logging.WARNING, logger="caft.cluster"):
            sim = similarity_matrix(mmap)
        assert "zero-norm" in caplog.text
        assert sim[0, 0] == 0.0 and sim[0, 1] == 0.0
        assert sim[1, 1] == 1.0

    def test_curve_is_matrix_row(self):
        rng = np.random.default_rng(13)
        mmap = MergedMap(grid=rng.normal(0, 1, (3, 4, 2)), class_token=rng.normal(0, 1, 2))
        sim = similarity_matrix(mmap)
        curve = similarity_curve(mmap, (1, 2))
        np.testing.assert_allclose(curve, sim[1 * 4 + 2], atol=1e-12)

    def test_curve_anchor_bounds(self):
        mmap = MergedMap(grid=np.ones((2, 2, 1)), class_token=np.ones(1))
        with pytest.raises(DataError):
            similarity_curve(mmap, (2, 0))
