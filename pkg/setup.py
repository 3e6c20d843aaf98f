"""Builds the optional compiled clustering kernels.

The package works without the extension (a pure-numpy twin is selected at
import time), so a failed compile only costs speed.
"""

import logging

from setuptools import Extension, setup

log = logging.getLogger(__name__)


def _extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        log.warning("cython/numpy unavailable, skipping compiled kernels")
        return []
    ext = Extension(
        "caft._kernels",
        sources=["src/caft/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=_extensions())
