"""Kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set ``LESIONTRACK_PURE_PYTHON=1`` to force the numpy path. ``BACKEND`` names
the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("LESIONTRACK_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _vec6(m):
    return np.ascontiguousarray(np.asarray(m, dtype=np.float64).reshape(6))


def sample_affine(src, m, out_shape):
    """Bilinear-sample ``src`` where output pixel (row i, col j) reads source
    index coordinates ``m @ (j, i, 1)``; samples outside the source are zero."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    return _impl.sample_affine(src, _vec6(m), int(out_shape[0]), int(out_shape[1]))


def l1_cost_grad(moving, fixed, m, eps):
    moving = np.ascontiguousarray(moving, dtype=np.float64)
    fixed = np.ascontiguousarray(fixed, dtype=np.float64)
    cost, grad = _impl.l1_cost_grad(moving, fixed, _vec6(m), float(eps))
    return float(cost), np.asarray(grad)


def nms_sorted(corners, order, thresh):
    """Greedy NMS over ``corners`` (n, 4) visited in ``order``; returns kept indices."""
    c = np.ascontiguousarray(corners, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.intp)
    x1, y1, x2, y2 = (np.ascontiguousarray(c[:, k]) for k in range(4))
    return [int(i) for i in _impl.nms_sorted(x1, y1, x2, y2, order, float(thresh))]
