"""Build script: compiles the optional Cython kernels in voxelselect._core.

The package works without the compiled extension (a numpy fallback is
selected at import time), so any build failure here is non-fatal.
"""

import numpy as np
from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/voxelselect/_core/_kernels.pyx",
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    ext_modules = []

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)
