"""Convolution lowering kernels.

The compiled Cython module is used when it imports cleanly; otherwise (or
when ``SMARTNET_PURE_PYTHON=1`` is set) the numpy implementation is used.
Both produce identical column layouts, so results agree bit-for-bit.
"""

from __future__ import annotations

import os

import numpy as np

from smartnet import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SMARTNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from smartnet import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(x), k, stride, padding)


def col2im(
    cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int
) -> np.ndarray:
    return _impl.col2im(np.ascontiguousarray(cols), tuple(x_shape), k, stride, padding)
