"""Global search: L1 affine registration of a template exam onto a search exam.

Transforms act on pixel-index coordinates (pixel ``(row i, col j)`` sits at
``(x=j, y=i)``) and map template-image points to search-image points.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, GeometryError
from .geometry import BoundingBox
from .image import Image

log = logging.getLogger(__name__)

__all__ = ["AffineTransform", "Image", "RegistrationConfig", "RegistrationResult",
           "downsample", "warp", "register", "map_box", "objective"]


@dataclass(frozen=True)
class AffineTransform:
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]),
                   float(m[0, 2]), float(m[1, 2]))

    @classmethod
    def about_point(cls, linear, center, translation=(0.0, 0.0)) -> "AffineTransform":
        """``x -> linear @ (x - center) + center + translation``."""
        a = np.asarray(linear, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        t = c + np.asarray(translation, dtype=np.float64) - a @ c
        return cls(a[0, 0], a[0, 1], a[1, 0], a[1, 1], t[0], t[1])

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def inverse(self) -> "AffineTransform":
        if abs(self.det) < 1e-12:
            raise GeometryError("singular affine transform")
        return AffineTransform.from_matrix(np.linalg.inv(self.matrix))

    def compose(self, first: "AffineTransform") -> "AffineTransform":
        """``self ∘ first``: apply ``first``, then ``self``."""
        return AffineTransform.from_matrix(self.matrix @ first.matrix)

    def apply(self, x, y):
        return self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty

    def rotation_deg(self) -> float:
        return math.degrees(math.atan2(self.a21 - self.a12, self.a11 + self.a22))

    def to_list(self) -> list[float]:
        return [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    base_factor: int = 8
    max_iter: int = 200
    tol: float = 1e-5
    window: int = 5
    eps: float = 1e-3

    def __post_init__(self):
        if self.levels < 1 or self.base_factor < 1 or self.max_iter < 0:
            raise ConfigError("registration: levels and base_factor must be >= 1, max_iter >= 0")
        if self.tol < 0 or self.eps <= 0 or self.window < 1:
            raise ConfigError("registration: tol must be >= 0, eps > 0, window >= 1")


@dataclass
class RegistrationResult:
    transform: AffineTransform
    objective: float
    identity_objective: float
    status: str = "ok"
    trace: list = field(default_factory=list)  # accepted objective values, one list per level

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def downsample(img: Image, factor: int) -> Image:
    """Block-mean pooling over ``factor x factor`` blocks; partial blocks are dropped."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    if factor == 1:
        return Image(img.data.copy(), img.spacing_mm)
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise ValueError(f"image {img.data.shape} smaller than factor {factor}")
    blocks = img.data[:h * factor, :w * factor].reshape(h, factor, w, factor)
    return Image(blocks.mean(axis=(1, 3)), img.spacing_mm * factor)


def warp(img: Image, t: AffineTransform, shape=None) -> Image:
    """Backward-warp ``img`` by ``t`` with bilinear interpolation and zero fill."""
    inv = t.inverse()
    if t == AffineTransform.identity() and shape is None:
        return Image(img.data.copy(), img.spacing_mm)
    out = kernels.sample_affine(img.data, inv.matrix[:2], shape or img.data.shape)
    return Image(out, img.spacing_mm)


def objective(template: Image, search: Image, t: AffineTransform, factor: int = 1) -> float:
    """Mean absolute difference between ``warp(template, t)`` and ``search``.

    With ``factor > 1`` the images are taken to be block-downsampled versions of
    the full-resolution pair that ``t`` is expressed for.
    """
    m = _to_level(t.inverse().matrix[:2], factor)
    moved = kernels.sample_affine(template.data, m, search.data.shape)
    return float(np.abs(moved - search.data).mean())


def map_box(t: AffineTransform, box: BoundingBox) -> BoundingBox:
    """Map a box through ``t``: center exactly, extents scaled by the column norms."""
    if abs(t.det) < 1e-12:
        raise GeometryError("singular affine transform")
    # box coordinates put pixel centers at +0.5, transforms at integers
    cx, cy = t.apply(box.cx - 0.5, box.cy - 0.5)
    sx = math.hypot(t.a11, t.a21)
    sy = math.hypot(t.a12, t.a22)
    return BoundingBox(cx + 0.5, cy + 0.5, box.w * sx, box.h * sy, box.frame)


# -- level bookkeeping ---------------------------------------------------------
# The optimizer works on the inverse map M (search index -> template index) at
# each pyramid level. A level with block factor f has index x_f with
# x_full = f * x_f + (f - 1) / 2.

def _to_level(m_full: np.ndarray, f: int) -> np.ndarray:
    a, t = m_full[:, :2], m_full[:, 2]
    c = np.full(2, (f - 1) / 2.0)
    return np.column_stack([a, (a @ c + t - c) / f])


def _to_full(m_lvl: np.ndarray, f: int) -> np.ndarray:
    a, t = m_lvl[:, :2], m_lvl[:, 2]
    c = np.full(2, (f - 1) / 2.0)
    return np.column_stack([a, f * t + c - a @ c])


def _theta_to_m(theta, c):
    b = theta[:4].reshape(2, 2)
    return np.column_stack([b, c + theta[4:] - b @ c])


def _m_to_theta(m, c):
    b = m[:, :2]
    return np.concatenate([b.ravel(), m[:, 2] - c + b @ c])


def _descend(moving: np.ndarray, fixed: np.ndarray, m0: np.ndarray, cfg: RegistrationConfig, trace: list):
    h, w = fixed.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    var_x = max((w * w - 1) / 12.0, 1.0)
    var_y = max((h * h - 1) / 12.0, 1.0)
    precond = np.array([1 / var_x, 1 / var_y, 1 / var_x, 1 / var_y, 1.0, 1.0])

    def evaluate(theta):
        m = _theta_to_m(theta, c)
        cost, gm = kernels.l1_cost_grad(moving, fixed, m, cfg.eps)
        g = np.array([
            gm[0] - gm[2] * c[0], gm[1] - gm[2] * c[1],
            gm[3] - gm[5] * c[0], gm[4] - gm[5] * c[1],
            gm[2], gm[5],
        ])
        return cost, g

    theta = _m_to_theta(m0, c)
    cost, g = evaluate(theta)
    if not math.isfinite(cost):
        return None
    costs = [cost]
    trace.append(cost)
    step = None
    for _ in range(cfg.max_iter):
        direction = -precond * g
        slope = float(g @ direction)
        if slope >= 0 or not math.isfinite(slope):
            break
        if step is None:
            step = 0.5 / math.sqrt(-slope)
        else:
            step *= 2.0
        accepted = False
        for _ in range(40):
            cand = theta + step * direction
            new_cost, new_g = evaluate(cand)
            if math.isfinite(new_cost) and new_cost <= cost + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta, cost, g = cand, new_cost, new_g
        costs.append(cost)
        trace.append(cost)
        if len(costs) > cfg.window:
            ref = costs[-1 - cfg.window]
            if ref <= 0 or (ref - cost) / ref < cfg.tol:
                break
    return _theta_to_m(theta, c)


def register(template: Image, search: Image, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the affine transform taking ``template`` onto ``search``.

    Coarse-to-fine gradient descent on a smoothed L1 cost over a pyramid whose
    finest level is ``cfg.base_factor`` times downsampled.
    """
    cfg = cfg or RegistrationConfig()
    if not math.isclose(template.spacing_mm, search.spacing_mm, rel_tol=1e-9):
        raise DataError(f"spacing mismatch: {template.spacing_mm} vs {search.spacing_mm}")

    factors = [cfg.base_factor * 2 ** k for k in range(cfg.levels - 1, -1, -1)]
    ident = AffineTransform.identity()
    base_t, base_s = downsample(template, cfg.base_factor), downsample(search, cfg.base_factor)
    id_obj = objective(base_t, base_s, ident, cfg.base_factor)

    m_full = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    trace: list = []
    status = "ok"
    for f in factors:
        mov = downsample(template, f).data
        fix = downsample(search, f).data
        trace.append([])
        m_lvl = _descend(mov, fix, _to_level(m_full, f), cfg, trace[-1])
        if m_lvl is None:
            status = "nonfinite"
            break
        m_full = _to_full(m_lvl, f)

    try:
        if status != "ok":
            raise GeometryError(status)
        inv = AffineTransform.from_matrix(np.vstack([m_full, [0.0, 0.0, 1.0]]))
        if not np.isfinite(inv.matrix).all():
            raise GeometryError("nonfinite")
        result = inv.inverse()
        obj = objective(base_t, base_s, result, cfg.base_factor)
    except GeometryError as exc:
        log.warning("registration failed (%s); falling back to identity", exc)
        return RegistrationResult(ident, id_obj, id_obj, status="fallback", trace=trace)
    if not math.isfinite(obj):
        return RegistrationResult(ident, id_obj, id_obj, status="fallback", trace=trace)
    if obj > id_obj:
        return RegistrationResult(ident, id_obj, id_obj, status="identity", trace=trace)
    return RegistrationResult(result, obj, id_obj, status=status, trace=trace)
