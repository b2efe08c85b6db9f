"""Pure numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np


def _gather(img, r, c):
    h, w = img.shape
    ok = (r >= 0) & (c >= 0) & (r < h) & (c < w)
    out = np.zeros(r.shape, dtype=np.float64)
    out[ok] = img[r[ok], c[ok]]
    return out


def _coords(m, out_h, out_w):
    jj, ii = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    x = m[0] * jj + m[1] * ii + m[2]
    y = m[3] * jj + m[4] * ii + m[5]
    return ii, jj, x, y


def _corners(src, x, y):
    h, w = src.shape
    inside = (x > -1.0) & (y > -1.0) & (x < w) & (y < h)
    c0 = np.floor(x).astype(np.intp)
    r0 = np.floor(y).astype(np.intp)
    fx = x - c0
    fy = y - r0
    # outside points get a sentinel far away so every neighbour reads 0
    c0 = np.where(inside, c0, -10)
    r0 = np.where(inside, r0, -10)
    v00 = _gather(src, r0, c0)
    v01 = _gather(src, r0, c0 + 1)
    v10 = _gather(src, r0 + 1, c0)
    v11 = _gather(src, r0 + 1, c0 + 1)
    return fx, fy, v00, v01, v10, v11


def sample_affine(src, m, out_h, out_w):
    src = np.ascontiguousarray(src, dtype=np.float64)
    _, _, x, y = _coords(np.asarray(m, dtype=np.float64), out_h, out_w)
    fx, fy, v00, v01, v10, v11 = _corners(src, x, y)
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


def l1_cost_grad(moving, fixed, m, eps):
    moving = np.ascontiguousarray(moving, dtype=np.float64)
    fixed = np.ascontiguousarray(fixed, dtype=np.float64)
    ii, jj, x, y = _coords(np.asarray(m, dtype=np.float64), *fixed.shape)
    fx, fy, v00, v01, v10, v11 = _corners(moving, x, y)
    v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    r = v - fixed
    c = np.sqrt(r * r + eps * eps)
    d = r / c
    gx = d * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
    gy = d * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
    n = fixed.size
    grad = np.array([
        (gx * jj).sum(), (gx * ii).sum(), gx.sum(),
        (gy * jj).sum(), (gy * ii).sum(), gy.sum(),
    ]) / n
    return float(c.sum() / n), grad


def nms_sorted(x1, y1, x2, y2, order, thresh):
    order = np.asarray(order)
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= thresh]
    return keep
