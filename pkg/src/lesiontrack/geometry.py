"""Box arithmetic: IoU, EIoU loss, center-ness, NMS, frame conversion, distances.

Boxes are stored in center form ``(cx, cy, w, h)`` in continuous pixel
coordinates where pixel column ``j`` spans ``[j, j + 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import GeometryError

FULL = "full"
SEARCH = "search"
TEMPLATE = "template"


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float
    frame: str = FULL

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, frame=FULL) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, frame)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d, frame=FULL) -> "BoundingBox":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), frame)


@dataclass(frozen=True)
class RegressionTargets:
    """Distances from a grid location to the left, top, right and bottom box edges."""
    l: float
    t: float
    r: float
    b: float

    @property
    def inside(self) -> bool:
        return self.l > 0 and self.t > 0 and self.r > 0 and self.b > 0


@dataclass(frozen=True)
class EnclosureStats:
    wc: float
    hc: float


@dataclass(frozen=True)
class FrameMeta:
    """Relation of a frame to the full image: ``x_frame = (x_full - origin_x) * scale``."""
    name: str = FULL
    origin_x: float = 0.0
    origin_y: float = 0.0
    scale: float = 1.0
    image_id: str = ""

    def to_full(self, x, y):
        return x / self.scale + self.origin_x, y / self.scale + self.origin_y

    def from_full(self, x, y):
        return (x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale

    def to_dict(self) -> dict:
        return {"name": self.name, "origin_x": self.origin_x, "origin_y": self.origin_y,
                "scale": self.scale, "image_id": self.image_id}


def _check_frames(a: BoundingBox, b: BoundingBox):
    if a.frame != b.frame:
        raise GeometryError(f"frame mismatch: {a.frame!r} vs {b.frame!r}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    _check_frames(a, b)
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, inter / union)


def centerness(t: RegressionTargets) -> float:
    vals = (t.l, t.t, t.r, t.b)
    if min(vals) < 0:
        raise GeometryError(f"negative regression target {vals}")
    mx_lr, mx_tb = max(t.l, t.r), max(t.t, t.b)
    if mx_lr == 0 or mx_tb == 0:
        raise GeometryError("degenerate location: zero distance pair")
    return math.sqrt((min(t.l, t.r) / mx_lr) * (min(t.t, t.b) / mx_tb))


def enclosure(a: BoundingBox, b: BoundingBox) -> EnclosureStats:
    _check_frames(a, b)
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    return EnclosureStats(max(ax2, bx2) - min(ax1, bx1), max(ay2, by2) - min(ay1, by1))


def eiou_loss(pred: BoundingBox, gt: BoundingBox) -> float:
    """``1 - IoU`` plus center-distance, width and height penalties normalized by
    the smallest enclosing box."""
    enc = enclosure(pred, gt)
    if enc.wc <= 0 or enc.hc <= 0:
        raise GeometryError("degenerate enclosing box")
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    return (1.0 - iou(pred, gt)
            + rho2 / (enc.wc ** 2 + enc.hc ** 2)
            + (pred.w - gt.w) ** 2 / enc.wc ** 2
            + (pred.h - gt.h) ** 2 / enc.hc ** 2)


def eiou_loss_grad(pred: BoundingBox, gt: BoundingBox) -> np.ndarray:
    """Analytic gradient of :func:`eiou_loss` w.r.t. ``(cx, cy, w, h)`` of ``pred``.

    At kinks (coincident edges) the derivative is taken one-sided from the
    interior of the intersection / enclosure.
    """
    _check_frames(pred, gt)
    x1, y1, x2, y2 = pred.corners
    g1, h1, g2, h2 = gt.corners

    # derivatives w.r.t. corners (x1, y1, x2, y2), chained to center form at the end
    d = np.zeros(4)

    iw = min(x2, g2) - max(x1, g1)
    ih = min(y2, h2) - max(y1, h1)
    area_p = pred.w * pred.h
    if iw > 0 and ih > 0:
        inter = iw * ih
        union = area_p + gt.area - inter
        d_inter = 1.0 / union + inter / union ** 2
        d_area = -inter / union ** 2
        diw = np.array([-1.0 if x1 > g1 else 0.0, 0.0, 1.0 if x2 < g2 else 0.0, 0.0])
        dih = np.array([0.0, -1.0 if y1 > h1 else 0.0, 0.0, 1.0 if y2 < h2 else 0.0])
        d_iou = d_inter * (ih * diw + iw * dih)
    else:
        d_iou = np.zeros(4)
        d_area = 0.0
    # area_p = (x2 - x1)(y2 - y1)
    d_iou = d_iou + d_area * np.array([-pred.h, -pred.w, pred.h, pred.w])
    d -= d_iou

    wc = max(x2, g2) - min(x1, g1)
    hc = max(y2, h2) - min(y1, h1)
    dwc = np.array([-1.0 if x1 < g1 else 0.0, 0.0, 1.0 if x2 > g2 else 0.0, 0.0])
    dhc = np.array([0.0, -1.0 if y1 < h1 else 0.0, 0.0, 1.0 if y2 > h2 else 0.0])

    c2 = wc ** 2 + hc ** 2
    dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
    rho2 = dx ** 2 + dy ** 2
    # center term: d/dcorner of rho2 (cx = (x1 + x2) / 2)
    d += np.array([dx, dy, dx, dy]) / c2
    d -= rho2 / c2 ** 2 * (2 * wc * dwc + 2 * hc * dhc)

    ew, eh = pred.w - gt.w, pred.h - gt.h
    d += 2 * ew / wc ** 2 * np.array([-1.0, 0.0, 1.0, 0.0])
    d -= 2 * ew ** 2 / wc ** 3 * dwc
    d += 2 * eh / hc ** 2 * np.array([0.0, -1.0, 0.0, 1.0])
    d -= 2 * eh ** 2 / hc ** 3 * dhc

    # x1 = cx - w/2, x2 = cx + w/2
    return np.array([
        d[0] + d[2],
        d[1] + d[3],
        (d[2] - d[0]) / 2.0,
        (d[3] - d[1]) / 2.0,
    ])


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS; a box is dropped when its IoU with a kept, higher-scoring box
    exceeds ``iou_threshold``. Ties in score keep the lower index first."""
    if len(boxes) != len(scores):
        raise GeometryError("boxes and scores differ in length")
    if not 0 < iou_threshold <= 1:
        raise GeometryError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if not len(boxes):
        return []
    s = np.asarray(scores, dtype=np.float64)
    if np.isnan(s).any():
        raise GeometryError("NaN score")
    frames = {b.frame for b in boxes}
    if len(frames) > 1:
        raise GeometryError(f"mixed frames in nms input: {sorted(frames)}")
    corners = np.array([b.corners for b in boxes], dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    return kernels.nms_sorted(corners, order, iou_threshold)


def center_distance(a: BoundingBox, b: BoundingBox, pixel_spacing_mm: float) -> float:
    _check_frames(a, b)
    if pixel_spacing_mm <= 0:
        raise GeometryError("pixel spacing must be positive")
    return pixel_spacing_mm * math.hypot(a.cx - b.cx, a.cy - b.cy)


def box_to_frame(box: BoundingBox, src: FrameMeta, dst: FrameMeta) -> BoundingBox:
    if box.frame != src.name:
        raise GeometryError(f"box is in frame {box.frame!r}, expected {src.name!r}")
    if src.image_id != dst.image_id:
        raise GeometryError(f"frames belong to different images: {src.image_id!r} vs {dst.image_id!r}")
    if src == dst:
        return box
    fx, fy = src.to_full(box.cx, box.cy)
    cx, cy = dst.from_full(fx, fy)
    k = dst.scale / src.scale
    return replace(box, cx=cx, cy=cy, w=box.w * k, h=box.h * k, frame=dst.name)
