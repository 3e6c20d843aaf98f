"""Selects the clustering kernel implementation at import time.

Prefers the compiled Cython extension; falls back to the pure-numpy twin.
Set ``CAFT_FORCE_PY=1`` to force the fallback (used by the benchmark and by
tests that exercise both paths).
"""

import os

if os.environ.get("CAFT_FORCE_PY"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

assign_labels = _impl.assign_labels
accumulate_centers = _impl.accumulate_centers
