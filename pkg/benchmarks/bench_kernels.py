#!/usr/bin/env python3
"""Times the compiled clustering kernels against the pure-numpy fallback.

Microbenchmarks call both kernel modules directly; the end-to-end rows run
the full token-clustering stage in subprocesses so the import-time backend
selection (CAFT_FORCE_PY) is exercised for real.

Usage: python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from caft import _kernels_py

try:
    from caft import _kernels
except ImportError:
    _kernels = None

PAPER_GRID = (24 * 24 + 1, 768)  # grid tokens + class token at base-scale export


def _time(fn, repeat=5):
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    return best


def bench_kernels(quick=False):
    rng = np.random.default_rng(0)
    sizes = [PAPER_GRID] if quick else [(577, 768), (2305, 768), (577, 1024)]
    rows = []
    for n, d in sizes:
        points = rng.normal(0, 1, (n, d))
        centers = points[rng.choice(n, 3, replace=False)].copy()
        labels, _ = _kernels_py.assign_labels(points, centers)
        for name, mod in (("python", _kernels_py), ("compiled", _kernels)):
            if mod is None:
                continue
            t_assign = _time(lambda: mod.assign_labels(points, centers))
            t_accum = _time(lambda: mod.accumulate_centers(points, labels, 3))
            rows.append((f"assign N={n} D={d}", name, t_assign))
            rows.append((f"accumulate N={n} D={d}", name, t_accum))
    return rows


def bench_end_to_end(quick=False):
    n_images = 5 if quick else 20
    script = (
        "import time, numpy as np\n"
        "from caft.backend import BACKEND\n"
        "from caft.cluster import cluster_tokens\n"
        "from caft.merge import MergedMap\n"
        "rng = np.random.default_rng(0)\n"
        f"maps = [MergedMap(grid=rng.normal(0, 1, (24, 24, 768)), class_token=rng.normal(0, 1, 768)) for _ in range({n_images})]\n"
        "start = time.monotonic()\n"
        "for i, m in enumerate(maps):\n"
        "    cluster_tokens(m, k=3, seed=i)\n"
        "print(BACKEND, time.monotonic() - start)\n"
    )
    rows = []
    for force in ("1", ""):  # python first so the speedup column can print
        env = dict(os.environ)
        if force:
            env["CAFT_FORCE_PY"] = "1"
        else:
            env.pop("CAFT_FORCE_PY", None)
        out = subprocess.run(
            [sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True
        )
        backend, elapsed = out.stdout.split()
        rows.append((f"cluster_tokens x{n_images} (24x24x768, k=3)", backend, float(elapsed)))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller sizes, fewer repeats")
    args = parser.parse_args()

    if _kernels is None:
        print("compiled kernels not built; showing the pure-python backend only\n")

    rows = bench_kernels(args.quick) + bench_end_to_end(args.quick)
    width = max(len(r[0]) for r in rows)
    print(f"{'benchmark':<{width}}  {'backend':<9} {'seconds':>10}")
    baselines = {}
    for name, backend, seconds in rows:
        baselines.setdefault(name, {})[backend] = seconds
        speed = ""
        if backend != "python" and "python" in baselines[name]:
            speed = f"  ({baselines[name]['python'] / seconds:.1f}x vs python)"
        print(f"{name:<{width}}  {backend:<9} {seconds:>10.4f}{speed}")


if __name__ == "__main__":
    main()
