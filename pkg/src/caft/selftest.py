"""Quick oracle cross-checks, exposed as the ``selftest`` subcommand.

Runs scaled-down versions of the verification the test suite performs:
k-means against exhaustive enumeration, the separable filter against direct
convolution, and analytic gradients against central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import atf, synth
from .cluster import kmeans
from .maskops import SoftMask, gaussian_kernel, gaussian_smooth


def _check_kmeans(instances: int, rng: np.random.Generator) -> tuple:
    worst_gap = 0.0
    matched = 0
    for _ in range(instances):
        n = int(rng.integers(4, 11))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, min(3, n) + 1))
        points = rng.normal(0, 1, (n, d))
        optimal, _ = synth.exact_kmeans_oracle(points, k)
        result = kmeans(points, k, seed=int(rng.integers(2**32)), restarts=20)
        if result.inertia < optimal - 1e-9 - 1e-9 * abs(optimal):
            return False, f"inertia {result.inertia} beats oracle {optimal}"
        gap = (result.inertia - optimal) / max(optimal, 1e-12)
        worst_gap = max(worst_gap, gap)
        if gap <= 1e-9:
            matched += 1
    ok = matched >= int(np.ceil(0.95 * instances))
    return ok, f"{matched}/{instances} optimal, worst relative gap {worst_gap:.3g}"


def _check_filter(instances: int, rng: np.random.Generator) -> tuple:
    worst = 0.0
    for _ in range(instances):
        h = int(rng.integers(8, 33))
        w = int(rng.integers(8, 33))
        sigma = float(rng.uniform(0.5, 3.0))
        radius = int(rng.integers(1, 5))
        values = rng.random((h, w))
        kernel = gaussian_kernel(sigma, radius)
        ours = gaussian_smooth(SoftMask(values), sigma, radius).values
        direct = synth.direct_convolution_oracle(values, np.outer(kernel, kernel))
        worst = max(worst, float(np.abs(ours - direct).max()))
    return worst <= 1e-6, f"max abs diff {worst:.3g}"


def _check_gradients(instances: int, rng: np.random.Generator) -> tuple:
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(2, 5))
        h = int(rng.integers(2, 4))
        config = atf.AtfConfig(
            dim=d, n_hidden_blocks=int(rng.integers(1, 3)), seed=int(rng.integers(2**32))
        )
        model = atf.init_atf(config, dtype=np.float64)
        grid = rng.normal(0, 1, (h, h, d))
        target = rng.integers(0, 2, (h, h))
        _, analytic = atf.atf_loss_grad(model, grid, target)
        numeric = synth.finite_difference_grad(model, grid, target, 1e-6)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(err))
    return worst < 1e-6, f"worst relative error {worst:.3g}"


def run(instances: int = 10, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    checks = [
        ("kmeans vs exhaustive enumeration", _check_kmeans),
        ("separable filter vs direct convolution", _check_filter),
        ("analytic vs finite-difference gradients", _check_gradients),
    ]
    failures = 0
    for name, check in checks:
        ok, detail = check(instances, rng)
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 2
