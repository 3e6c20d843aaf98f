"""Pure-numpy twin of the compiled clustering kernels.

Selected by :mod:`caft.backend` when the Cython extension is unavailable or
when ``CAFT_FORCE_PY`` is set. Semantics match the compiled version; float
summation order may differ in the last bits.
"""

import numpy as np


def assign_labels(points, centers):
    """Nearest-center assignment.

    Returns ``(labels, sqdist)`` where ``labels[i]`` is the index of the
    closest center (first index wins ties) and ``sqdist[i]`` the squared
    Euclidean distance to it.
    """
    d2 = (
        (points * points).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    np.maximum(d2, 0.0, out=d2)
    labels = d2.argmin(axis=1).astype(np.int64)
    return labels, d2[np.arange(points.shape[0]), labels]


def accumulate_centers(points, labels, k):
    """Per-cluster coordinate sums and member counts."""
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    for q in range(k):
        members = points[labels == q]
        if members.size:
            sums[q] = members.sum(axis=0)
    return sums, counts
