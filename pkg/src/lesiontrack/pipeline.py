"""Cascade: registration -> large-lesion bypass -> local tracking -> refinement."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError
from .geometry import FULL, BoundingBox, FrameMeta, box_to_frame
from .image import Image, read_pgm
from .refine import (RefineConfig, RefineNet, RefinePairData, filter_candidates, label_candidates,
                     refine_search_image, refine_template_input, score_candidates)
from .registration import RegistrationConfig, map_box, register
from .sampling.manifest import CaseManifest, Pair
from .sampling.patches import VARIANTS, PatchSpec, extract_search, extract_template
from .tracknet import (LabelMaps, TrackNet, TrackSample, assign_labels, decode, predict, search_input,
                       template_input)

log = logging.getLogger(__name__)

METHODS = ("affine", "tracker", "full")
SELECTIONS = ("similarity", "fused")
STAGES = ("registration", "bypass", "tracker_only", "refined", "failed")


@dataclass(frozen=True)
class PipelineConfig:
    spec: PatchSpec = PatchSpec(template_px=128, search_px=256, spacing_mm=0.28)
    variant: str = "mask_guided"
    use_centerness: bool = True
    top_k: int = 32
    method: str = "full"
    selection: str = "similarity"
    registration: RegistrationConfig = RegistrationConfig()
    refine: RefineConfig = RefineConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"template variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")


@dataclass
class TrackResult:
    box: BoundingBox
    stage: str
    cls_score: float | None = None
    similarity: float | None = None
    diagnostics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "stage": self.stage, "cls_score": self.cls_score,
                "similarity": self.similarity, "diagnostics": self.diagnostics, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d) -> "TrackResult":
        return cls(BoundingBox.from_dict(d["box"]), d["stage"], d.get("cls_score"), d.get("similarity"),
                   dict(d.get("diagnostics", {})), list(d.get("flags", [])))


def select_candidate(candidates, selection: str = "similarity"):
    """Highest similarity; ties go to higher cls score, then lower index.

    ``selection="fused"`` ranks by similarity * cls score instead (same tie-breaks).
    """
    best = None
    for pos, c in enumerate(candidates):
        primary = c.similarity * c.cls_score if selection == "fused" else c.similarity
        key = (primary, c.cls_score, -pos)
        if best is None or key > best[0]:
            best = (key, c)
    return None if best is None else best[1]


def _search_frames(spatch):
    return spatch.frame, FrameMeta(FULL, image_id=spatch.frame.image_id)


def track(template_img: Image, gt_box: BoundingBox, search_img: Image, tracker: TrackNet | None,
          refiner: RefineNet | None, cfg: PipelineConfig) -> TrackResult:
    spec = cfg.spec
    if not math.isclose(template_img.spacing_mm, spec.spacing_mm, rel_tol=1e-6):
        raise ConfigError(f"image spacing {template_img.spacing_mm} differs from patch spacing {spec.spacing_mm}")
    reg = register(template_img, search_img, cfg.registration)
    mapped = map_box(reg.transform, gt_box)
    diag = {"registration_objective": reg.objective, "registration_status": reg.status,
            "candidate_count": 0}
    flags = ["registration_fallback"] if reg.status == "fallback" else []

    if cfg.method == "affine":
        return TrackResult(mapped, "registration", diagnostics=diag, flags=flags)
    if max(gt_box.w, gt_box.h) * template_img.spacing_mm > spec.template_extent_mm:
        return TrackResult(mapped, "bypass", diagnostics=diag, flags=flags + ["large_lesion"])
    if tracker is None:
        raise ConfigError(f"method {cfg.method!r} needs tracker weights")

    tpatch = extract_template(template_img, gt_box, spec, cfg.variant, image_id="template")
    spatch = extract_search(search_img, (mapped.cx, mapped.cy), spec, image_id="search")
    flags += spatch.flags
    maps = predict(tracker, template_input(tpatch), search_input(spatch, cfg.variant))
    stride = tracker.cfg.total_stride
    dets = decode(maps, cfg.use_centerness, cfg.top_k, stride, spec.search_px)
    src, dst = _search_frames(spatch)
    top = dets[0]
    tracker_only = TrackResult(box_to_frame(top.box, src, dst), "tracker_only", cls_score=top.score,
                               diagnostics=diag, flags=flags)
    if cfg.method == "tracker":
        return tracker_only
    if refiner is None:
        raise ConfigError("method 'full' needs refiner weights")

    rc = cfg.refine
    cands = filter_candidates([d.box for d in dets], [d.score for d in dets], rc.nms_iou, rc.min_score)
    diag["candidate_count"] = len(cands)
    if not cands:
        tracker_only.flags.append("no_candidates")
        return tracker_only
    rt = tpatch if cfg.variant == "mask_guided" else extract_template(
        template_img, gt_box, spec, "mask_guided", image_id="template")
    scored = score_candidates(refiner, refine_template_input(rt, rc.refine_px),
                              refine_search_image(spatch.image, rc.refine_px), cands,
                              spec.search_px, rc.refine_px)
    best = select_candidate(scored, cfg.selection)
    diag["selected_patch_box"] = best.box.to_dict()
    return TrackResult(box_to_frame(best.box, src, dst), "refined", cls_score=best.cls_score,
                       similarity=best.similarity, diagnostics=diag, flags=flags)


# -- manifest-level helpers ----------------------------------------------------

def load_pair_images(manifest: CaseManifest, pair: Pair):
    t = read_pgm(manifest.image_path(pair.template), manifest.spacing_mm)
    s = read_pgm(manifest.image_path(pair.search), manifest.spacing_mm)
    return t, s


def _pool(jobs, initializer=None, initargs=()):
    torch.set_num_threads(1)
    return ProcessPoolExecutor(jobs, initializer=initializer, initargs=initargs)


def _map(fn, items, jobs, initializer=None, initargs=()):
    if jobs > 1 and len(items) > 1:
        with _pool(jobs, initializer, initargs) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    if initializer is not None:
        initializer(*initargs)
    return [fn(x) for x in items]


_STATE: dict = {}


def _init_state(**kw):
    torch.set_num_threads(1)
    _STATE.clear()
    _STATE.update(kw)


def _track_one(pair: Pair):
    manifest, cfg = _STATE["manifest"], _STATE["cfg"]
    t0 = time.perf_counter()
    try:
        t_img, s_img = load_pair_images(manifest, pair)
    except DataError as exc:
        res = TrackResult(pair.template.box, "failed", diagnostics={"error": str(exc)}, flags=["missing_image"])
        return pair.pair_id, res, time.perf_counter() - t0
    res = track(t_img, pair.template.box, s_img, _STATE["tracker"], _STATE["refiner"], cfg)
    return pair.pair_id, res, time.perf_counter() - t0


def track_pairs(manifest: CaseManifest, pairs: list[Pair], tracker, refiner, cfg: PipelineConfig, jobs: int = 1):
    """``[(pair_id, TrackResult, seconds)]`` in input order."""
    return _map(_track_one, pairs, jobs, _init_state_kw, (manifest, cfg, tracker, refiner))


def _init_state_kw(manifest, cfg, tracker, refiner):
    _init_state(manifest=manifest, cfg=cfg, tracker=tracker, refiner=refiner)


def _sample_one(pair: Pair):
    manifest, cfg, backbone = _STATE["manifest"], _STATE["cfg"], _STATE["backbone"]
    t_img, s_img = load_pair_images(manifest, pair)
    return prepare_sample(t_img, pair.template.box, s_img, pair.search.box, cfg, backbone, pair.pair_id)


def prepare_sample(t_img: Image, gt_t: BoundingBox, s_img: Image, gt_s: BoundingBox, cfg: PipelineConfig,
                   backbone, pair_id: str = "", with_patches: bool = False):
    """Training sample with the search crop centered where inference would put it."""
    reg = register(t_img, s_img, cfg.registration)
    mapped = map_box(reg.transform, gt_t)
    tpatch = extract_template(t_img, gt_t, cfg.spec, cfg.variant, image_id="template")
    spatch = extract_search(s_img, (mapped.cx, mapped.cy), cfg.spec, gt_s, image_id="search")
    n = backbone.map_size(cfg.spec.search_px)
    if spatch.gt_box is None:
        labels = LabelMaps(np.zeros((n, n)), np.zeros((n, n)), np.zeros((4, n, n)), np.ones((n, n), bool),
                           None, ["gt_outside_patch"])
    else:
        labels = assign_labels(spatch.gt_box, n, backbone.total_stride, cfg.spec.search_px)
    sample = TrackSample(template_input(tpatch), search_input(spatch, cfg.variant), labels, pair_id)
    if with_patches:
        return sample, tpatch, spatch
    return sample


def build_tracker_samples(manifest: CaseManifest, pairs: list[Pair], cfg: PipelineConfig, backbone,
                          jobs: int = 1) -> list[TrackSample]:
    return _map(_sample_one, pairs, jobs, _init_samples, (manifest, cfg, backbone))


def _init_samples(manifest, cfg, backbone):
    _init_state(manifest=manifest, cfg=cfg, backbone=backbone)


def _harvest_one(item):
    idx, pair = item
    manifest, cfg, tracker = _STATE["manifest"], _STATE["cfg"], _STATE["tracker"]
    t_img, s_img = load_pair_images(manifest, pair)
    return harvest_pair(t_img, pair.template.box, s_img, pair.search.box, tracker, cfg,
                        np.random.default_rng([cfg.refine.seed, idx]), pair.pair_id)


def harvest_pair(t_img, gt_t, s_img, gt_s, tracker, cfg: PipelineConfig, rng, pair_id="") -> RefinePairData | None:
    """Runs the tracker on one training pair and labels the surviving candidates."""
    rc = cfg.refine
    sample, tpatch, spatch = prepare_sample(t_img, gt_t, s_img, gt_s, cfg, tracker.cfg, pair_id, with_patches=True)
    if spatch.gt_box is None:
        return None
    maps = predict(tracker, sample.template, sample.search)
    dets = decode(maps, cfg.use_centerness, cfg.top_k, tracker.cfg.total_stride, cfg.spec.search_px)
    cands = filter_candidates([d.box for d in dets], [d.score for d in dets], rc.nms_iou, rc.min_score)
    boxes, labels = label_candidates(cands, spatch.gt_box, rc, rng)
    rt = tpatch if cfg.variant == "mask_guided" else extract_template(
        t_img, gt_t, cfg.spec, "mask_guided", image_id="template")
    return RefinePairData(refine_template_input(rt, rc.refine_px), refine_search_image(spatch.image, rc.refine_px),
                          cfg.spec.search_px, boxes, labels, pair_id)


def harvest_refine_data(manifest: CaseManifest, pairs: list[Pair], tracker: TrackNet, cfg: PipelineConfig,
                        jobs: int = 1) -> list[RefinePairData]:
    out = _map(_harvest_one, list(enumerate(pairs)), jobs, _init_harvest, (manifest, cfg, tracker))
    return [d for d in out if d is not None]


def _init_harvest(manifest, cfg, tracker):
    _init_state(manifest=manifest, cfg=cfg, tracker=tracker)
