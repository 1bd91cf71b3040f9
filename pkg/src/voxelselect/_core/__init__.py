"""Numerical core: compiled Cython kernels with a pure-numpy fallback.

The compiled module `_kernels` is preferred when importable; set the
environment variable VOXELSELECT_PURE_PYTHON=1 to force the fallback.
Both backends expose the same functions and agree to floating-point
round-off (asserted by the test suite).
"""

import os

from . import kernels_py

if os.environ.get("VOXELSELECT_PURE_PYTHON", "") not in ("", "0"):
    _impl = kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = kernels_py
        BACKEND = "python"

block_stats = _impl.block_stats
block_loglik_values = _impl.block_loglik_values
gauss_abs_transform = kernels_py.gauss_abs_transform
eta_varying = _impl.eta_varying
eta_varying_unknown = _impl.eta_varying_unknown


def backend() -> str:
    """Name of the active numerical backend ("compiled" or "python")."""
    return BACKEND
