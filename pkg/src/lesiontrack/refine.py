"""Score refinement: NMS/threshold filtering of tracker candidates and a
mask-guided Siamese distance network trained with IoU-banded labels."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .geometry import BoundingBox, iou, nms
from .sampling.patches import TemplatePatch, make_mask_channel, resize_bilinear, resize_nearest
from .tracknet import Backbone, BackboneConfig, init_weights, normalize

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE = 0, 1


@dataclass(frozen=True)
class RefineConfig:
    refine_px: int = 128
    nms_iou: float = 0.7
    min_score: float = 0.05
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    neg_ratio: float = 2.0
    epochs: int = 5
    batch_size: int = 8
    lr: float = 5e-5
    jitter: float = 0.1
    max_jitter: int = 2
    hidden: int = 64
    seed: int = 0
    backbone: BackboneConfig = BackboneConfig(in_channels=2)

    def __post_init__(self):
        if not 0 < self.nms_iou <= 1 or not 0 <= self.min_score < 1:
            raise ConfigError("refine: nms_iou in (0, 1], min_score in [0, 1) required")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError("refine: need 0 <= neg_iou <= pos_iou <= 1")
        if self.refine_px < 8 or self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("refine: refine_px >= 8, epochs >= 0, batch_size >= 1, lr >= 0")
        if self.backbone.in_channels != 2:
            raise ConfigError("refine: backbone must take 2 channels (intensity + mask)")


@dataclass
class RefineCandidate:
    box: BoundingBox
    cls_score: float
    similarity: float | None = None
    index: int = 0


def filter_candidates(boxes, scores, nms_iou: float = 0.7, min_score: float = 0.05) -> list[RefineCandidate]:
    """NMS at ``nms_iou`` then drop candidates scoring ``<= min_score``; descending order."""
    keep = nms(boxes, scores, nms_iou)
    return [RefineCandidate(boxes[i], float(scores[i]), index=i) for i in keep if scores[i] > min_score]


def distance_label(overlap: float, pos_iou: float = 0.5, neg_iou: float = 0.3):
    """0 (same lesion) above ``pos_iou``, 1 below ``neg_iou``, ``None`` (ignored) between."""
    if overlap > pos_iou:
        return POSITIVE
    if overlap < neg_iou:
        return NEGATIVE
    return None


def similarity_score(distance: float) -> float:
    if not 0.0 <= distance <= 1.0 or math.isnan(distance):
        raise ValueError(f"distance must lie in [0, 1], got {distance}")
    return 1.0 - distance


class RefineNet(nn.Module):
    """Shared backbone -> global average pool -> subtract -> 2-layer MLP -> logit."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig(in_channels=2), hidden: int = 64):
        super().__init__()
        self.cfg = cfg
        self.hidden = hidden
        self.backbone = Backbone(cfg)
        self.fc1 = nn.Linear(self.backbone.out_channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        init_weights(self)

    def embed(self, x):
        return self.backbone(x).mean(dim=(2, 3))

    def head_input(self, template, search):
        return self.embed(template) - self.embed(search)

    def forward(self, template, search):
        if template.shape != search.shape:
            raise ConfigError(f"refiner inputs differ in shape: {tuple(template.shape)} vs {tuple(search.shape)}")
        return self.fc2(F.relu(self.fc1(self.head_input(template, search))))[:, 0]

    def distance(self, template, search):
        return torch.sigmoid(self(template, search))


def make_refiner(cfg: RefineConfig) -> RefineNet:
    torch.manual_seed(cfg.seed)
    return RefineNet(cfg.backbone, cfg.hidden)


def refine_template_input(t: TemplatePatch, refine_px: int) -> np.ndarray:
    if t.mask is None:
        raise ConfigError("refiner template must be mask-guided")
    img = resize_bilinear(t.image, refine_px) if t.image.shape[0] != refine_px else t.image
    mask = resize_nearest(t.mask, refine_px) if t.mask.shape[0] != refine_px else t.mask
    return np.stack([normalize(img), mask]).astype(np.float32)


def refine_search_image(search_image: np.ndarray, refine_px: int) -> np.ndarray:
    img = resize_bilinear(search_image, refine_px) if search_image.shape[0] != refine_px else search_image
    return normalize(img).astype(np.float32)


def refine_search_input(search_small: np.ndarray, box: BoundingBox, search_px: int,
                        refine_px: int) -> tuple[np.ndarray, bool]:
    """Search-side input: pre-resized normalized intensity + nearest-resized candidate mask."""
    mask, ok = make_mask_channel(box, search_px)
    if search_px != refine_px:
        mask = resize_nearest(mask, refine_px)
    return np.stack([search_small, mask]).astype(np.float32), ok


def build_refine_pair(template: TemplatePatch, search_image: np.ndarray, box: BoundingBox, refine_px: int):
    """Returns ``(template_input, search_input, ok)`` at refine resolution."""
    t_in = refine_template_input(template, refine_px)
    s_in, ok = refine_search_input(refine_search_image(search_image, refine_px), box,
                                   search_image.shape[0], refine_px)
    return t_in, s_in, ok


def score_candidates(model: RefineNet, template_in: np.ndarray, search_small: np.ndarray,
                     candidates: list[RefineCandidate], search_px: int, refine_px: int) -> list[RefineCandidate]:
    if not candidates:
        return []
    s_in = np.stack([refine_search_input(search_small, c.box, search_px, refine_px)[0] for c in candidates])
    t_in = np.repeat(template_in[None], len(candidates), axis=0)
    with torch.no_grad():
        d = model.distance(torch.from_numpy(t_in), torch.from_numpy(s_in)).double().numpy()
    return [replace(c, similarity=similarity_score(float(np.clip(v, 0.0, 1.0)))) for c, v in zip(candidates, d)]


# -- training ------------------------------------------------------------------

@dataclass
class RefinePairData:
    template: np.ndarray      # (2, R, R)
    search_small: np.ndarray  # (R, R) normalized intensity
    search_px: int
    boxes: list
    labels: list              # POSITIVE / NEGATIVE / None
    pair_id: str = ""


@dataclass
class RefineTrace:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def jitter_boxes(gt: BoundingBox, n: int, amount: float, rng) -> list[BoundingBox]:
    out = []
    for _ in range(n):
        dx, dy = rng.uniform(-amount, amount, 2) * np.array([gt.w, gt.h])
        sw, sh = 1.0 + rng.uniform(-amount, amount, 2)
        out.append(BoundingBox(gt.cx + dx, gt.cy + dy, gt.w * sw, gt.h * sh, gt.frame))
    return out


def label_candidates(candidates: list[RefineCandidate], gt: BoundingBox, cfg: RefineConfig, rng):
    """IoU-banded labels; injects jittered gt copies when no candidate is positive."""
    boxes = [c.box for c in candidates]
    labels = [distance_label(iou(b, gt), cfg.pos_iou, cfg.neg_iou) for b in boxes]
    if POSITIVE not in labels and cfg.max_jitter > 0:
        for b in jitter_boxes(gt, cfg.max_jitter, cfg.jitter, rng):
            lab = distance_label(iou(b, gt), cfg.pos_iou, cfg.neg_iou)
            if lab == POSITIVE:
                boxes.append(b)
                labels.append(lab)
    return boxes, labels


def epoch_items(pairs: list[RefinePairData], neg_ratio: float, rng) -> list[tuple[int, int]]:
    """All positives plus at most ``neg_ratio`` times as many negatives, shuffled."""
    pos = [(p, k) for p, d in enumerate(pairs) for k, lab in enumerate(d.labels) if lab == POSITIVE]
    neg = [(p, k) for p, d in enumerate(pairs) for k, lab in enumerate(d.labels) if lab == NEGATIVE]
    n_neg = min(len(neg), int(math.floor(neg_ratio * len(pos))))
    chosen = [neg[i] for i in sorted(rng.choice(len(neg), n_neg, replace=False))] if n_neg else []
    items = pos + chosen
    return [items[i] for i in rng.permutation(len(items))]


def _batch(pairs, items, refine_px):
    t = np.stack([pairs[p].template for p, _ in items])
    s = np.stack([refine_search_input(pairs[p].search_small, pairs[p].boxes[k], pairs[p].search_px, refine_px)[0]
                  for p, k in items])
    y = np.array([pairs[p].labels[k] for p, k in items], dtype=np.float32)
    return torch.from_numpy(t), torch.from_numpy(s), torch.from_numpy(y)


def train_refiner(model: RefineNet, pairs: list[RefinePairData], cfg: RefineConfig,
                  max_steps: int | None = None) -> RefineTrace:
    n_pos = sum(lab == POSITIVE for d in pairs for lab in d.labels)
    if n_pos == 0:
        raise DataError(f"refiner training has zero positive candidates across {len(pairs)} pairs")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    trace = RefineTrace()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        items = epoch_items(pairs, cfg.neg_ratio, rng)
        total, n_batches = 0.0, 0
        for start in range(0, len(items), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            t, s, y = _batch(pairs, items[start:start + cfg.batch_size], cfg.refine_px)
            loss = F.binary_cross_entropy_with_logits(model(t, s), y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite refiner loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n_batches += 1
            lv = loss.item()
            total += lv
            trace.steps.append(lv)
        if n_batches:
            n_neg = sum(1 for p, k in items if pairs[p].labels[k] == NEGATIVE)
            trace.epochs.append({"epoch": epoch, "bce": total / n_batches,
                                 "positives": len(items) - n_neg, "negatives": n_neg})
            log.info("refiner epoch %d: %s", epoch, trace.epochs[-1])
    model.eval()
    return trace
