"""Local search: mask-guided anchor-free Siamese tracker.

A shared plain-conv backbone embeds template and search patches, the center
7x7 template features are depth-wise correlated against the search features,
and two head stacks predict classification / center-ness logits and
``(l, t, r, b)`` edge distances per grid location.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError
from .geometry import SEARCH, BoundingBox, RegressionTargets, centerness
from .sampling.patches import SearchPatch, TemplatePatch

log = logging.getLogger(__name__)

NORM_MEAN, NORM_STD = 0.5, 0.25


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 2
    widths: tuple = (16, 32, 64, 64)
    total_stride: int = 8
    head_width: int = 64
    head_depth: int = 2
    crop: int = 7

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ConfigError("backbone: in_channels must be 1 or 2")
        n_down = int(round(math.log2(self.total_stride))) if self.total_stride > 0 else -1
        if n_down < 0 or 2 ** n_down != self.total_stride or n_down > len(self.widths):
            raise ConfigError("backbone: total_stride must be a power of two with one block per halving")
        if min(self.widths, default=0) < 1 or self.head_width < 1 or self.head_depth < 0 or self.crop < 1:
            raise ConfigError("backbone: widths/head sizes must be positive")

    @property
    def strides(self) -> tuple:
        n_down = int(round(math.log2(self.total_stride)))
        return tuple(2 if i < n_down else 1 for i in range(len(self.widths)))

    def feature_size(self, px: int) -> int:
        for s in self.strides:
            px = (px - 1) // s + 1
        return px

    def map_size(self, search_px: int) -> int:
        return self.feature_size(search_px) - self.crop + 1

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths), "total_stride": self.total_stride,
                "head_width": self.head_width, "head_depth": self.head_depth, "crop": self.crop}

    @classmethod
    def from_dict(cls, d) -> "BackboneConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    ctr: float = 1.0
    reg: float = 3.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    ctr_loss: str = "focal"

    def __post_init__(self):
        if min(self.cls, self.ctr, self.reg) < 0 or self.cls + self.ctr + self.reg == 0:
            raise ConfigError("loss weights must be nonnegative and not all zero")
        if self.ctr_loss not in ("focal", "bce"):
            raise ConfigError("ctr_loss must be 'focal' or 'bce'")


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        layers = []
        cin = cfg.in_channels
        for w, s in zip(cfg.widths, cfg.strides):
            layers += [_conv(cin, w, s), nn.ReLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


def _trunk(cin, width, depth):
    layers = []
    for _ in range(depth):
        layers += [_conv(cin, width), nn.ReLU()]
        cin = width
    return nn.Sequential(*layers), cin


def init_weights(module: nn.Module, gain: float = 1.0):
    """Fan-in scaled uniform init with zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            with torch.no_grad():
                m.weight.mul_(gain)
            nn.init.zeros_(m.bias)


@dataclass
class ScoreMaps:
    cls_logit: torch.Tensor  # (B, H, W)
    ctr_logit: torch.Tensor  # (B, H, W)
    reg: torch.Tensor        # (B, 4, H, W): l, t, r, b in search-patch pixels

    @property
    def cls(self):
        return torch.sigmoid(self.cls_logit)

    @property
    def ctr(self):
        return torch.sigmoid(self.ctr_logit)


def xcorr_depthwise(search: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    b, c = kernel.shape[:2]
    x = search.reshape(1, b * c, search.shape[2], search.shape[3])
    k = kernel.reshape(b * c, 1, kernel.shape[2], kernel.shape[3])
    out = F.conv2d(x, k, groups=b * c)
    return out.reshape(b, c, out.shape[2], out.shape[3])


class TrackNet(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), prior: float = 0.01):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        c = self.backbone.out_channels
        self.cls_trunk, cc = _trunk(c, cfg.head_width, cfg.head_depth)
        self.cls_out = _conv(cc, 2)
        self.reg_trunk, rc = _trunk(c, cfg.head_width, cfg.head_depth)
        self.reg_out = _conv(rc, 4)
        init_weights(self)
        # near-silent output layers: reg starts at one stride, cls/ctr at the prior
        init_weights(self.cls_out, 0.01)
        init_weights(self.reg_out, 0.01)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - prior) / prior))

    def template_features(self, template):
        f = self.backbone(template)
        k = self.cfg.crop
        if f.shape[2] < k or f.shape[3] < k:
            raise ConfigError(f"template features {tuple(f.shape[2:])} smaller than the {k}x{k} crop")
        r0 = (f.shape[2] - k) // 2
        c0 = (f.shape[3] - k) // 2
        return f[:, :, r0:r0 + k, c0:c0 + k]

    def forward(self, template, search) -> ScoreMaps:
        if template.shape[1] != self.cfg.in_channels or search.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got "
                              f"{template.shape[1]} / {search.shape[1]}")
        if template.shape[0] != search.shape[0]:
            raise ConfigError("template and search batch sizes differ")
        kernel = self.template_features(template)
        # window mean rather than sum keeps head inputs O(1) for any crop size
        corr = xcorr_depthwise(self.backbone(search), kernel) / (kernel.shape[2] * kernel.shape[3])
        cls = self.cls_out(self.cls_trunk(corr))
        raw = self.reg_out(self.reg_trunk(corr))
        reg = torch.exp(raw.clamp(-10.0, 10.0)) * self.cfg.total_stride
        return ScoreMaps(cls[:, 0], cls[:, 1], reg)


# -- inputs --------------------------------------------------------------------

def normalize(x: np.ndarray) -> np.ndarray:
    return (x - NORM_MEAN) / NORM_STD


def template_input(t: TemplatePatch) -> np.ndarray:
    """(C, H, W) network input for a template patch of any variant."""
    img = normalize(t.image)
    if t.variant == "mask_guided":
        return np.stack([img, t.mask]).astype(np.float32)
    return img[None].astype(np.float32)


def search_input(s: SearchPatch | np.ndarray, variant: str) -> np.ndarray:
    img = normalize(s.image if isinstance(s, SearchPatch) else s)
    if variant == "mask_guided":
        # shared weights need matching channels; the search side has no known box
        return np.stack([img, np.zeros_like(img)]).astype(np.float32)
    return img[None].astype(np.float32)


def in_channels_for(variant: str) -> int:
    return 2 if variant == "mask_guided" else 1


# -- labels --------------------------------------------------------------------

def grid_points(map_size: int, stride: int, search_px: int) -> np.ndarray:
    """Search-patch coordinate of each grid index along one axis."""
    offset = (search_px - (map_size - 1) * stride) / 2.0
    return np.arange(map_size) * stride + offset


@dataclass
class LabelMaps:
    cls: np.ndarray    # (H, W) in {0, 1}
    ctr: np.ndarray    # (H, W) in [0, 1]
    reg: np.ndarray    # (4, H, W): l, t, r, b
    valid: np.ndarray  # (H, W) bool
    gt: BoundingBox
    flags: list = field(default_factory=list)

    @property
    def n_pos(self) -> int:
        return int(self.cls.sum())


def assign_labels(gt: BoundingBox, map_size: int, stride: int, search_px: int) -> LabelMaps:
    """Grid locations strictly inside ``gt`` are positives with edge-distance targets."""
    p = grid_points(map_size, stride, search_px)
    x1, y1, x2, y2 = gt.corners
    px = p[None, :]
    py = p[:, None]
    l = np.broadcast_to(px - x1, (map_size, map_size))
    r = np.broadcast_to(x2 - px, (map_size, map_size))
    t = np.broadcast_to(py - y1, (map_size, map_size))
    b = np.broadcast_to(y2 - py, (map_size, map_size))
    pos = (l > 0) & (r > 0) & (t > 0) & (b > 0)
    reg = np.stack([l, t, r, b]).astype(np.float64)
    ctr = np.zeros((map_size, map_size))
    for i, j in zip(*np.nonzero(pos)):
        ctr[i, j] = centerness(RegressionTargets(l[i, j], t[i, j], r[i, j], b[i, j]))
    flags = [] if pos.any() else ["no_positives"]
    return LabelMaps(pos.astype(np.float64), ctr, reg * pos, np.ones((map_size, map_size), bool), gt, flags)


# -- losses --------------------------------------------------------------------

def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise sigmoid focal loss for binary targets."""
    p = torch.sigmoid(logits)
    log_p = F.logsigmoid(logits)
    log_1p = F.logsigmoid(-logits)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p ** gamma * log_1p
    return targets * pos + (1 - targets) * neg


def soft_focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0):
    """BCE against soft targets modulated by ``|target - p| ** gamma``."""
    p = torch.sigmoid(logits)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (targets - p).abs() ** gamma * bce


def eiou_loss_xyxy(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Elementwise EIoU loss for (N, 4) corner-form tensors."""
    px1, py1, px2, py2 = pred.unbind(-1)
    gx1, gy1, gx2, gy2 = gt.unbind(-1)
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    iw = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0)
    ih = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp(min=0)
    inter = iw * ih
    iou = inter / (pw * ph + gw * gh - inter)
    wc = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    hc = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    rho2 = ((px1 + px2 - gx1 - gx2) ** 2 + (py1 + py2 - gy1 - gy2) ** 2) / 4
    return 1 - iou + rho2 / (wc ** 2 + hc ** 2) + (pw - gw) ** 2 / wc ** 2 + (ph - gh) ** 2 / hc ** 2


@dataclass
class LabelBatch:
    cls: torch.Tensor   # (B, H, W)
    ctr: torch.Tensor   # (B, H, W)
    reg: torch.Tensor   # (B, 4, H, W)
    valid: torch.Tensor  # (B, H, W) bool

    @classmethod
    def stack(cls, labels: list[LabelMaps], dtype=torch.float32) -> "LabelBatch":
        return cls(
            torch.as_tensor(np.stack([l.cls for l in labels]), dtype=dtype),
            torch.as_tensor(np.stack([l.ctr for l in labels]), dtype=dtype),
            torch.as_tensor(np.stack([l.reg for l in labels]), dtype=dtype),
            torch.as_tensor(np.stack([l.valid for l in labels])),
        )


def total_loss(maps: ScoreMaps, labels: LabelBatch, w: LossWeights = LossWeights()):
    """Weighted sum of classification, center-ness and EIoU terms.

    Returns ``(total, parts)`` with ``parts`` holding the three unweighted
    terms and the positive-location count.
    """
    if maps.cls_logit.shape != labels.cls.shape:
        raise ConfigError(f"score map {tuple(maps.cls_logit.shape)} vs labels {tuple(labels.cls.shape)}")
    valid = labels.valid
    l_cls = focal_loss(maps.cls_logit[valid], labels.cls[valid], w.focal_alpha, w.focal_gamma).mean()
    pos = (labels.cls > 0.5) & valid
    n_pos = int(pos.sum())
    if n_pos == 0:
        zero = maps.cls_logit.sum() * 0.0
        l_ctr = l_reg = zero
    else:
        ctr_logit, ctr_t = maps.ctr_logit[pos], labels.ctr[pos]
        if w.ctr_loss == "focal":
            l_ctr = soft_focal_loss(ctr_logit, ctr_t, w.focal_gamma).mean()
        else:
            l_ctr = F.binary_cross_entropy_with_logits(ctr_logit, ctr_t)
        reg_p = maps.reg.permute(0, 2, 3, 1)[pos]      # (N, 4) l t r b
        reg_t = labels.reg.permute(0, 2, 3, 1)[pos]
        # boxes relative to the grid point; the point cancels inside EIoU
        pred = torch.stack([-reg_p[:, 0], -reg_p[:, 1], reg_p[:, 2], reg_p[:, 3]], -1)
        gt = torch.stack([-reg_t[:, 0], -reg_t[:, 1], reg_t[:, 2], reg_t[:, 3]], -1)
        l_reg = eiou_loss_xyxy(pred, gt).mean()
    total = w.cls * l_cls + w.ctr * l_ctr + w.reg * l_reg
    return total, {"cls": l_cls, "ctr": l_ctr, "reg": l_reg, "n_pos": n_pos}


# -- decoding ------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    cls: float
    ctr: float


def decode(maps: ScoreMaps, use_centerness: bool = True, top_k: int = 32, stride: int = 8,
           search_px: int = 256, index: int = 0) -> list[Detection]:
    """Top-``top_k`` boxes (search-patch frame) of one batch element by score."""
    with torch.no_grad():
        cls = maps.cls[index].double().numpy()
        ctr = maps.ctr[index].double().numpy()
        reg = maps.reg[index].double().numpy()
    n = cls.shape[0]
    p = grid_points(n, stride, search_px)
    score = cls * ctr if use_centerness else cls
    flat = score.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:top_k]
    out = []
    for k in order:
        i, j = divmod(int(k), n)
        l, t, r, b = reg[:, i, j]
        box = BoundingBox.from_corners(p[j] - l, p[i] - t, p[j] + r, p[i] + b, SEARCH)
        out.append(Detection(box, float(flat[k]), float(cls[i, j]), float(ctr[i, j])))
    return out


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-5
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("train: epochs >= 0, batch_size >= 1, lr >= 0 required")


@dataclass
class TrackSample:
    template: np.ndarray  # (C, Ht, Wt)
    search: np.ndarray    # (C, Hs, Ws)
    labels: LabelMaps
    pair_id: str = ""


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)  # dicts: epoch, total, cls, ctr, reg
    steps: list = field(default_factory=list)   # total loss per step


def make_tracker(cfg: BackboneConfig, seed: int) -> TrackNet:
    torch.manual_seed(seed)
    return TrackNet(cfg)


def _adam(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train_tracker(model: TrackNet, samples: list[TrackSample], cfg: TrainConfig,
                  weights: LossWeights = LossWeights()) -> TrainTrace:
    """Adam on :func:`total_loss`; deterministic for a given seed."""
    usable = [s for s in samples if s.labels.n_pos > 0]
    if len(usable) < len(samples):
        log.info("skipping %d pairs without positive locations", len(samples) - len(usable))
    if not usable:
        raise ConfigError("training set is empty (no pair has positive locations)")
    opt = _adam(model, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(usable))
        sums = {"total": 0.0, "cls": 0.0, "ctr": 0.0, "reg": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = [usable[i] for i in order[start:start + cfg.batch_size]]
            tmpl = torch.from_numpy(np.stack([s.template for s in batch]))
            srch = torch.from_numpy(np.stack([s.search for s in batch]))
            labels = LabelBatch.stack([s.labels for s in batch])
            loss, parts = total_loss(model(tmpl, srch), labels, weights)
            if not torch.isfinite(loss):
                ids = [s.pair_id for s in batch]
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}; batch pairs {ids}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n_batches += 1
            lv = loss.item()
            trace.steps.append(lv)
            sums["total"] += lv
            for k in ("cls", "ctr", "reg"):
                sums[k] += parts[k].item()
        if n_batches:
            trace.epochs.append({"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}})
            log.info("tracker epoch %d: %s", epoch, trace.epochs[-1])
    model.eval()
    return trace


def predict(model: TrackNet, template: np.ndarray, search: np.ndarray) -> ScoreMaps:
    with torch.no_grad():
        return model(torch.from_numpy(template[None]), torch.from_numpy(search[None]))
