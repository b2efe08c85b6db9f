"""Template/search patch geometry, mask channels and the three template variants."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import ConfigError
from ..geometry import FULL, SEARCH, TEMPLATE, BoundingBox, FrameMeta, box_to_frame
from ..image import Image

VARIANTS = ("crop_resize", "mask_guided", "masked")


@dataclass(frozen=True)
class PatchSpec:
    template_extent_mm: float = 80.0
    search_extent_mm: float = 110.0
    template_px: int = 512
    search_px: int = 1024
    spacing_mm: float = 0.07

    def __post_init__(self):
        vals = (self.template_extent_mm, self.search_extent_mm, self.template_px,
                self.search_px, self.spacing_mm)
        if min(vals) <= 0:
            raise ConfigError(f"patch spec values must be positive: {vals}")
        if self.search_extent_mm <= self.template_extent_mm:
            raise ConfigError("search_extent_mm must exceed template_extent_mm")

    @property
    def template_crop_px(self) -> int:
        return int(round(self.template_extent_mm / self.spacing_mm))

    @property
    def search_crop_px(self) -> int:
        return int(round(self.search_extent_mm / self.spacing_mm))


@dataclass
class TemplatePatch:
    image: np.ndarray
    mask: np.ndarray | None
    frame: FrameMeta
    box: BoundingBox
    variant: str
    oversized: bool = False


@dataclass
class SearchPatch:
    image: np.ndarray
    frame: FrameMeta
    gt_box: BoundingBox | None = None
    flags: list = field(default_factory=list)


@dataclass
class PatchPair:
    template: TemplatePatch
    search: SearchPatch

    @property
    def template_mask(self):
        return self.template.mask

    @property
    def gt_search_box(self):
        return self.search.gt_box


def crop_frame(center, side_px: float, out_px: int, name: str, image_id: str = "") -> FrameMeta:
    cx, cy = center
    return FrameMeta(name, cx - side_px / 2.0, cy - side_px / 2.0, out_px / side_px, image_id)


def resample(img: np.ndarray, frame: FrameMeta, out_px: int) -> np.ndarray:
    """Bilinear crop+resize of a full image into ``frame`` (zero padding outside)."""
    inv = 1.0 / frame.scale
    m = [inv, 0.0, 0.5 * inv + frame.origin_x - 0.5,
         0.0, inv, 0.5 * inv + frame.origin_y - 0.5]
    return kernels.sample_affine(img, m, (out_px, out_px))


def resize_bilinear(img: np.ndarray, out_px: int) -> np.ndarray:
    h, w = img.shape
    sx, sy = w / out_px, h / out_px
    m = [sx, 0.0, 0.5 * sx - 0.5, 0.0, sy, 0.5 * sy - 0.5]
    return kernels.sample_affine(img, m, (out_px, out_px))


def resize_nearest(mask: np.ndarray, out_px: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum((np.arange(out_px) + 0.5) * h / out_px, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_px) + 0.5) * w / out_px, w - 1).astype(np.intp)
    return mask[np.ix_(rows, cols)]


def make_mask_channel(box: BoundingBox, patch_px: int) -> tuple[np.ndarray, bool]:
    """Binary mask of pixels whose centers fall in the box (corners rounded,
    half-open). Returns ``(mask, ok)``; ``ok`` is False for an empty mask."""
    x1, y1, x2, y2 = (int(np.floor(v + 0.5)) for v in box.corners)
    mask = np.zeros((patch_px, patch_px), dtype=np.float64)
    c1, c2 = max(x1, 0), min(x2, patch_px)
    r1, r2 = max(y1, 0), min(y2, patch_px)
    if c1 >= c2 or r1 >= r2:
        return mask, False
    mask[r1:r2, c1:c2] = 1.0
    return mask, True


def clamp_box(box: BoundingBox, size: float) -> BoundingBox | None:
    x1, y1, x2, y2 = box.corners
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, size), min(y2, size)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox.from_corners(x1, y1, x2, y2, box.frame)


def extract_template(img: Image, gt_box: BoundingBox, spec: PatchSpec, variant: str = "mask_guided",
                     image_id: str = "") -> TemplatePatch:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown template variant {variant!r}; expected one of {VARIANTS}")
    side = float(spec.template_crop_px)
    lesion_px = max(gt_box.w, gt_box.h)
    oversized = lesion_px * img.spacing_mm > spec.template_extent_mm
    if variant == "crop_resize" and lesion_px > side:
        side = lesion_px
    frame = crop_frame((gt_box.cx, gt_box.cy), side, spec.template_px, TEMPLATE, image_id)
    patch = resample(img.data, frame, spec.template_px)
    src = FrameMeta(FULL, image_id=image_id)
    box = box_to_frame(BoundingBox(gt_box.cx, gt_box.cy, gt_box.w, gt_box.h, FULL), src, frame)
    mask = None
    if variant != "crop_resize":
        mask, _ = make_mask_channel(box, spec.template_px)
        if variant == "masked":
            patch = patch * mask
    return TemplatePatch(patch, mask, frame, box, variant, oversized=oversized and variant != "crop_resize")


def extract_search(img: Image, center, spec: PatchSpec, gt_box: BoundingBox | None = None,
                   image_id: str = "") -> SearchPatch:
    side = float(spec.search_crop_px)
    frame = crop_frame(center, side, spec.search_px, SEARCH, image_id)
    flags = []
    cx, cy = center
    if not (0 <= cx <= img.width and 0 <= cy <= img.height):
        flags.append("center_outside_image")
    patch = resample(img.data, frame, spec.search_px)
    gt = None
    if gt_box is not None:
        src = FrameMeta(FULL, image_id=image_id)
        mapped = box_to_frame(BoundingBox(gt_box.cx, gt_box.cy, gt_box.w, gt_box.h, FULL), src, frame)
        gt = clamp_box(mapped, spec.search_px)
        if gt is None:
            flags.append("gt_outside_patch")
    return SearchPatch(patch, frame, gt, flags)
