# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: bilinear affine sampling, fused L1 registration cost, greedy NMS.

Every function here has a numpy twin in ``_kernels_py`` with the same signature.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()


cdef inline double _pix(const double[:, ::1] img, Py_ssize_t r, Py_ssize_t c,
                        Py_ssize_t h, Py_ssize_t w) nogil:
    if r < 0 or c < 0 or r >= h or c >= w:
        return 0.0
    return img[r, c]


def sample_affine(const double[:, ::1] src, const double[::1] m, Py_ssize_t out_h, Py_ssize_t out_w):
    """Bilinear samples of ``src`` at ``m @ (col, row, 1)`` for every output pixel; zero outside."""
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    out = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, c0, r0
    cdef double x, y, fx, fy
    with nogil:
        for i in range(out_h):
            for j in range(out_w):
                x = m[0] * j + m[1] * i + m[2]
                y = m[3] * j + m[4] * i + m[5]
                if x <= -1.0 or y <= -1.0 or x >= w or y >= h:
                    o[i, j] = 0.0
                    continue
                c0 = <Py_ssize_t>floor(x)
                r0 = <Py_ssize_t>floor(y)
                fx = x - c0
                fy = y - r0
                o[i, j] = ((1.0 - fy) * ((1.0 - fx) * _pix(src, r0, c0, h, w) + fx * _pix(src, r0, c0 + 1, h, w))
                           + fy * ((1.0 - fx) * _pix(src, r0 + 1, c0, h, w) + fx * _pix(src, r0 + 1, c0 + 1, h, w)))
    return out


def l1_cost_grad(const double[:, ::1] moving, const double[:, ::1] fixed, const double[::1] m, double eps):
    """Mean smoothed-L1 residual between ``moving`` sampled through ``m`` and ``fixed``.

    Returns ``(cost, grad)`` with ``grad`` the derivative w.r.t. the six entries of ``m``.
    """
    cdef Py_ssize_t h = moving.shape[0], w = moving.shape[1]
    cdef Py_ssize_t fh = fixed.shape[0], fw = fixed.shape[1]
    grad = np.zeros(6, dtype=np.float64)
    cdef double[::1] g = grad
    cdef Py_ssize_t i, j, c0, r0
    cdef double x, y, fx, fy, v00, v01, v10, v11, v, r, c, d, gx, gy
    cdef double total = 0.0, eps2 = eps * eps
    cdef double g0 = 0, g1 = 0, g2 = 0, g3 = 0, g4 = 0, g5 = 0
    with nogil:
        for i in range(fh):
            for j in range(fw):
                x = m[0] * j + m[1] * i + m[2]
                y = m[3] * j + m[4] * i + m[5]
                if x <= -1.0 or y <= -1.0 or x >= w or y >= h:
                    r = -fixed[i, j]
                    total += sqrt(r * r + eps2)
                    continue
                c0 = <Py_ssize_t>floor(x)
                r0 = <Py_ssize_t>floor(y)
                fx = x - c0
                fy = y - r0
                v00 = _pix(moving, r0, c0, h, w)
                v01 = _pix(moving, r0, c0 + 1, h, w)
                v10 = _pix(moving, r0 + 1, c0, h, w)
                v11 = _pix(moving, r0 + 1, c0 + 1, h, w)
                v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
                r = v - fixed[i, j]
                c = sqrt(r * r + eps2)
                total += c
                d = r / c
                gx = d * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                gy = d * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                g0 += gx * j
                g1 += gx * i
                g2 += gx
                g3 += gy * j
                g4 += gy * i
                g5 += gy
    cdef double n = <double>(fh * fw)
    g[0] = g0 / n
    g[1] = g1 / n
    g[2] = g2 / n
    g[3] = g3 / n
    g[4] = g4 / n
    g[5] = g5 / n
    return total / n, grad


def nms_sorted(const double[::1] x1, const double[::1] y1, const double[::1] x2,
               const double[::1] y2, const Py_ssize_t[::1] order, double thresh):
    """Greedy suppression over boxes already ordered by descending score."""
    cdef Py_ssize_t n = order.shape[0]
    cdef cnp.uint8_t[::1] dead = np.zeros(n, dtype=np.uint8)
    keep = []
    cdef Py_ssize_t a, b, i, k
    cdef double iw, ih, inter, area_i, area_k
    for a in range(n):
        if dead[a]:
            continue
        i = order[a]
        keep.append(i)
        area_i = (x2[i] - x1[i]) * (y2[i] - y1[i])
        for b in range(a + 1, n):
            if dead[b]:
                continue
            k = order[b]
            iw = min(x2[i], x2[k]) - max(x1[i], x1[k])
            ih = min(y2[i], y2[k]) - max(y1[i], y1[k])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_k = (x2[k] - x1[k]) * (y2[k] - y1[k])
            if inter / (area_i + area_k - inter) > thresh:
                dead[b] = 1
    return keep
