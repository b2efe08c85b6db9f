"""Synthetic temporal phantom pairs with known lesion boxes.

Each case is one view of a textured half-ellipse "breast" carrying a single
lesion (a bright Gaussian-profile ellipse for masses, a cluster of small dots
for calcifications). Time point 0 is the reference anatomy; every later time
point is rendered through a random affine with the lesion shifted locally,
resized and re-brightened.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, DataError
from ..geometry import BoundingBox
from ..image import write_pgm
from ..registration import AffineTransform
from .manifest import Case, CaseManifest, TimePoint, View

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    image_px: int = 512
    spacing_mm: float = 0.28
    n_cases: int = 8
    timepoints: int = 3
    test_fraction: float = 0.5
    calc_fraction: float = 0.3
    lesion_size_mm: tuple = (10.0, 40.0)
    large_lesion_fraction: float = 0.0
    large_lesion_size_mm: tuple = (85.0, 100.0)
    tx_range: tuple = (-40.0, 40.0)
    ty_range: tuple = (-40.0, 40.0)
    rotation_deg: tuple = (-10.0, 10.0)
    scale_range: tuple = (0.9, 1.1)
    size_drift: float = 0.3
    intensity_drift: float = 0.2
    lesion_shift_mm: float = 6.0
    noise_std: float = 0.01
    n_waves: int = 8

    def __post_init__(self):
        if self.image_px < 32 or self.spacing_mm <= 0:
            raise ConfigError("synth: image_px must be >= 32 and spacing_mm > 0")
        if self.n_cases < 0 or self.timepoints < 1:
            raise ConfigError("synth: n_cases must be >= 0 and timepoints >= 1")
        for name in ("test_fraction", "calc_fraction", "large_lesion_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"synth: {name} must lie in [0, 1]")
        for name in ("lesion_size_mm", "large_lesion_size_mm", "tx_range", "ty_range",
                     "rotation_deg", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"synth: {name} must be an ordered (lo, hi) pair")
        if self.scale_range[0] <= 0 or self.lesion_size_mm[0] <= 0:
            raise ConfigError("synth: scale and lesion size must be positive")
        if not 0 <= self.size_drift < 1 or not 0 <= self.intensity_drift < 1:
            raise ConfigError("synth: drifts must lie in [0, 1)")
        if self.lesion_shift_mm < 0 or self.noise_std < 0:
            raise ConfigError("synth: lesion_shift_mm and noise_std must be >= 0")


@dataclass
class _Anatomy:
    axes: tuple
    waves: np.ndarray  # rows: kx, ky, phase, amplitude
    base: float


@dataclass
class _Lesion:
    kind: str
    center: np.ndarray
    radii: np.ndarray
    amplitude: float
    dots: np.ndarray | None = None  # unit-disk offsets, calcifications only


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _anatomy(rng, cfg: SynthConfig) -> _Anatomy:
    n = cfg.image_px
    waves = []
    for _ in range(cfg.n_waves):
        wavelength = rng.uniform(0.08, 0.35) * n
        theta = rng.uniform(0, math.pi)
        k = 2 * math.pi / wavelength
        waves.append((k * math.cos(theta), k * math.sin(theta), rng.uniform(0, 2 * math.pi), rng.uniform(0.5, 1.0)))
    waves = np.array(waves).reshape(-1, 4)
    if len(waves):
        waves[:, 3] /= waves[:, 3].sum()
    return _Anatomy((rng.uniform(0.75, 0.9) * n, rng.uniform(0.4, 0.47) * n), waves, rng.uniform(0.3, 0.4))


def _support(ana: _Anatomy, x, y, n):
    rho = np.sqrt((x / ana.axes[0]) ** 2 + ((y - (n - 1) / 2.0) / ana.axes[1]) ** 2)
    return 1.0 / (1.0 + np.exp(-(1.0 - rho) / 0.02)), rho


def _background(ana: _Anatomy, x, y, n):
    sup, _ = _support(ana, x, y, n)
    tex = np.zeros_like(x)
    for kx, ky, ph, amp in ana.waves:
        tex += amp * np.sin(kx * x + ky * y + ph)
    return sup * (ana.base + 0.15 * tex)


def phantom(cfg: SynthConfig, seed) -> np.ndarray:
    """Lesion-free background of one random anatomy (smooth, values in [0, 1])."""
    rng = np.random.default_rng(seed)
    n = cfg.image_px
    jj, ii = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64))
    return np.clip(_background(_anatomy(rng, cfg), jj, ii, n), 0.0, 1.0)


def _lesion_intensity(les: _Lesion, x, y):
    dx = (x - les.center[0]) / les.radii[0]
    dy = (y - les.center[1]) / les.radii[1]
    if les.kind == "mass":
        rho = np.sqrt(dx * dx + dy * dy)
        return les.amplitude * np.exp(-0.5 * rho * rho) / (1.0 + np.exp(-(1.0 - rho) / 0.08))
    out = np.zeros_like(x)
    sigma = 1.3
    for ox, oy in les.dots:
        px = les.center[0] + ox * les.radii[0]
        py = les.center[1] + oy * les.radii[1]
        out += les.amplitude * np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2 * sigma * sigma))
    return out


def _lesion_box(les: _Lesion, t: AffineTransform) -> BoundingBox:
    a = t.linear
    cx, cy = t.apply(les.center[0], les.center[1])
    hw = math.hypot(a[0, 0] * les.radii[0], a[0, 1] * les.radii[1])
    hh = math.hypot(a[1, 0] * les.radii[0], a[1, 1] * les.radii[1])
    # index coordinates -> box coordinates (pixel centers at +0.5)
    return BoundingBox(cx + 0.5, cy + 0.5, 2 * hw, 2 * hh)


def _render(ana: _Anatomy, les: _Lesion, t: AffineTransform, n: int, noise, rng):
    jj, ii = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64))
    inv = t.inverse()
    x, y = inv.apply(jj, ii)
    img = _background(ana, x, y, n) + _lesion_intensity(les, x, y)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _case_timeline(rng, cfg: SynthConfig, lesion_type: str):
    """Draws anatomy, a base lesion and per-time-point transforms/lesions."""
    n = cfg.image_px
    ana = _anatomy(rng, cfg)
    center_img = ((n - 1) / 2.0, (n - 1) / 2.0)
    large = rng.uniform() < cfg.large_lesion_fraction
    size_mm = _uniform(rng, cfg.large_lesion_size_mm if large else cfg.lesion_size_mm)
    rx = size_mm / cfg.spacing_mm / 2.0
    ry = rx * rng.uniform(0.7, 1.0)
    if rng.uniform() < 0.5:
        rx, ry = ry, rx
    amp = rng.uniform(0.25, 0.4) if lesion_type == "mass" else rng.uniform(0.35, 0.5)
    dots = None
    if lesion_type == "calcification":
        k = int(rng.integers(5, 31))
        r = np.sqrt(rng.uniform(0, 1, k)) * 0.9
        phi = rng.uniform(0, 2 * math.pi, k)
        dots = np.column_stack([r * np.cos(phi), r * np.sin(phi)])

    transforms = [AffineTransform.identity()]
    for _ in range(1, cfg.timepoints):
        s = _uniform(rng, cfg.scale_range)
        th = math.radians(_uniform(rng, cfg.rotation_deg))
        lin = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        transforms.append(AffineTransform.about_point(
            lin, center_img, (_uniform(rng, cfg.tx_range), _uniform(rng, cfg.ty_range))))

    shift_px = cfg.lesion_shift_mm / cfg.spacing_mm
    drifts = [(np.zeros(2), 1.0, 1.0)]
    for _ in range(1, cfg.timepoints):
        r, phi = shift_px * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
        drifts.append((np.array([r * math.cos(phi), r * math.sin(phi)]),
                       1.0 + _uniform(rng, (-cfg.size_drift, cfg.size_drift)),
                       1.0 + _uniform(rng, (-cfg.intensity_drift, cfg.intensity_drift))))

    for _attempt in range(100):
        c0 = np.array([rng.uniform(0.05, 0.8) * ana.axes[0], (n - 1) / 2.0 + rng.uniform(-0.8, 0.8) * ana.axes[1]])
        lesions = [_Lesion(lesion_type, c0 + d, np.array([rx, ry]) * s, amp * a, dots) for d, s, a in drifts]
        if all(_placement_ok(ana, les, t, n) for les, t in zip(lesions, transforms)):
            return ana, lesions, transforms
    raise DataError("synth: could not place lesion inside the breast support after 100 attempts")


def _placement_ok(ana, les: _Lesion, t: AffineTransform, n: int) -> bool:
    phi = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    ex = les.center[0] + les.radii[0] * np.cos(phi)
    ey = les.center[1] + les.radii[1] * np.sin(phi)
    _, rho = _support(ana, ex, ey, n)
    if (rho > 0.95).any() or (ex < 0).any():
        return False
    x1, y1, x2, y2 = _lesion_box(les, t).corners
    return x1 >= 0 and y1 >= 0 and x2 <= n and y2 <= n


def _generate_case(args):
    cfg, seed_seq, index, split, out_dir = args
    rng = np.random.default_rng(seed_seq)
    lesion_type = "calcification" if rng.uniform() < cfg.calc_fraction else "mass"
    ana, lesions, transforms = _case_timeline(rng, cfg, lesion_type)
    case_id = f"case{index:04d}"
    tps = []
    for k, (les, t) in enumerate(zip(lesions, transforms)):
        img = _render(ana, les, t, cfg.image_px, cfg.noise_std, rng)
        name = f"images/{case_id}_V0_t{k}.pgm"
        if out_dir is not None:
            write_pgm(os.path.join(out_dir, name), img)
        tps.append((TimePoint(k, name, _lesion_box(les, t)), img))
    return Case(case_id, lesion_type, [View("V0", [tp for tp, _ in tps])], split), [im for _, im in tps]


def synth_cases(cfg: SynthConfig, seed: int, out_dir=None, jobs: int = 1):
    """Returns ``(cases, images)``; ``images[i][k]`` is the array for case i, time point k.

    Writes PGMs under ``out_dir/images`` when ``out_dir`` is given. Output is
    independent of ``jobs``: every case draws from its own spawned seed.
    """
    seqs = np.random.SeedSequence(seed).spawn(cfg.n_cases)
    n_test = int(round(cfg.n_cases * cfg.test_fraction))
    splits = ["train"] * (cfg.n_cases - n_test) + ["test"] * n_test
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    args = [(cfg, s, i, splits[i], out_dir) for i, s in enumerate(seqs)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_generate_case, args))
    else:
        results = [_generate_case(a) for a in args]
    return [c for c, _ in results], [ims for _, ims in results]


def synth_generate(cfg: SynthConfig, seed: int, out_dir, jobs: int = 1) -> CaseManifest:
    cases, _ = synth_cases(cfg, seed, out_dir, jobs)
    return CaseManifest(cases, cfg.spacing_mm, os.path.abspath(out_dir))


def synth_config_dict(cfg: SynthConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
