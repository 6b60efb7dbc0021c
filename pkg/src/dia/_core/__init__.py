"""Numerical core for grouped two-stage least squares.

The compiled extension is used when it is importable; otherwise the numpy
implementation is used. Set ``DIA_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
kernels = _fallback

if os.environ.get("DIA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as kernels  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        kernels = _fallback

features = _fallback.features
n_features = _fallback.n_features

__all__ = ["BACKEND", "kernels", "features", "n_features"]
