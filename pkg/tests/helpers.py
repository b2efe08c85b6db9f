"""Independent oracles shared by the test modules."""
import numpy as np

from lesiontrack.geometry import BoundingBox


def raster_iou(a, b, size=None):
    """IoU of two integer-corner boxes by painting unit pixels."""
    size = size or int(max(a[2], a[3], b[2], b[3])) + 1
    ga = np.zeros((size, size), bool)
    gb = np.zeros((size, size), bool)
    ga[a[1]:a[3], a[0]:a[2]] = True
    gb[b[1]:b[3], b[0]:b[2]] = True
    union = (ga | gb).sum()
    return (ga & gb).sum() / union if union else 0.0


def random_int_box(rng, lo=0, hi=20):
    x1, x2 = sorted(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
    y1, y2 = sorted(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
    return int(x1), int(y1), int(x2), int(y2)


def box(c):
    return BoundingBox.from_corners(*c)


def nms_oracle(corners, scores, thr):
    """Exhaustive: the kept set is the unique subset S where every index is in S
    exactly when no higher-priority member of S overlaps it by more than ``thr``.
    Every subset is checked; the answer is returned in priority order."""
    n = len(corners)
    if n == 0:
        return []
    prio = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {i: r for r, i in enumerate(prio)}
    sup = np.zeros(n, np.int64)
    for i in range(n):
        for j in range(n):
            if rank[j] < rank[i] and raster_iou(corners[i], corners[j]) > thr:
                sup[i] |= 1 << j
    masks = np.arange(1 << n, dtype=np.int64)
    ok = np.ones(len(masks), bool)
    for i in range(n):
        ok &= (((masks >> i) & 1) == 1) == ((masks & sup[i]) == 0)
    (sol,) = np.flatnonzero(ok)
    return [i for i in prio if (sol >> i) & 1]


def central_diff(f, x, h=1e-4):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        g.flat[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


# -- synthetic fixtures for overfit checks -----------------------------------

def synthetic_pair(seed):
    """One desk-scale synthetic lesion pair: ``(template_img, gt_t, search_img, gt_s)``."""
    from lesiontrack.image import Image
    from lesiontrack.sampling import SynthConfig, synth_cases

    cfg = SynthConfig(n_cases=1, timepoints=2, calc_fraction=0.0)
    cases, images = synth_cases(cfg, seed)
    tps = cases[0].views[0].timepoints
    return (Image(images[0][1], cfg.spacing_mm), tps[1].box, Image(images[0][0], cfg.spacing_mm), tps[0].box)


def overfit_tracker(seed, steps=500):
    """Trains a fresh tracker on one pair; returns the top-1 IoU on that pair."""
    from lesiontrack.geometry import iou
    from lesiontrack.pipeline import PipelineConfig, prepare_sample
    from lesiontrack.tracknet import BackboneConfig, TrainConfig, decode, make_tracker, predict, train_tracker

    t_img, gt_t, s_img, gt_s = synthetic_pair(seed)
    bb = BackboneConfig()
    sample = prepare_sample(t_img, gt_t, s_img, gt_s, PipelineConfig(), bb, f"overfit{seed}")
    net = make_tracker(bb, seed)
    train_tracker(net, [sample], TrainConfig(epochs=steps, batch_size=1, lr=1e-3, seed=seed, max_steps=steps))
    top = decode(predict(net, sample.template, sample.search), True, 1)[0]
    return iou(top.box, sample.labels.gt)


def overfit_refiner(seed, steps=300, n_pos=4, n_neg=6):
    """Trains a fresh refiner on 10 labeled candidates of one pair; returns their mean BCE."""
    import torch
    import torch.nn.functional as F

    from lesiontrack.geometry import BoundingBox, iou
    from lesiontrack.pipeline import PipelineConfig
    from lesiontrack.refine import (NEGATIVE, POSITIVE, RefineConfig, RefinePairData, _batch, jitter_boxes,
                                    make_refiner, refine_search_image, refine_template_input, train_refiner)
    from lesiontrack.sampling import extract_search, extract_template

    t_img, gt_t, s_img, gt_s = synthetic_pair(seed)
    spec = PipelineConfig().spec
    tpatch = extract_template(t_img, gt_t, spec, "mask_guided")
    spatch = extract_search(s_img, (gt_s.cx, gt_s.cy), spec, gt_s)
    gt = spatch.gt_box
    rng = np.random.default_rng(seed)
    boxes = jitter_boxes(gt, n_pos, 0.05, rng)
    while len(boxes) < n_pos + n_neg:
        b = BoundingBox(*rng.uniform(gt.w, spec.search_px - gt.w, 2), gt.w, gt.h, gt.frame)
        if iou(b, gt) < 0.3:
            boxes.append(b)
    labels = [POSITIVE if iou(b, gt) > 0.5 else NEGATIVE for b in boxes]
    cfg = RefineConfig(epochs=steps, batch_size=n_pos + n_neg, lr=1e-3, seed=seed)
    data = RefinePairData(refine_template_input(tpatch, cfg.refine_px),
                          refine_search_image(spatch.image, cfg.refine_px), spec.search_px, boxes, labels)
    net = make_refiner(cfg)
    train_refiner(net, [data], cfg, max_steps=steps)
    t, s, y = _batch([data], [(0, k) for k in range(len(boxes))], cfg.refine_px)
    with torch.no_grad():
        return float(F.binary_cross_entropy_with_logits(net(t, s), y))


# (group, method, AO, accuracy, robustness) transcribed from the published comparison tables
PUBLISHED_COMPARISON = [
    ("mass", "affine", 0.389, 0.430, 0.095), ("mass", "siamfc++", 0.424, 0.469, 0.094),
    ("mass", "mask-guided", 0.453, 0.501, 0.097), ("mass", "full", 0.467, 0.516, 0.095),
    ("calc", "affine", 0.338, 0.404, 0.165), ("calc", "siamfc++", 0.410, 0.471, 0.130),
    ("calc", "mask-guided", 0.412, 0.475, 0.133), ("calc", "full", 0.425, 0.490, 0.133),
    ("total", "affine", 0.374, 0.423, 0.116), ("total", "siamfc++", 0.420, 0.469, 0.105),
    ("total", "mask-guided", 0.441, 0.494, 0.108), ("total", "full", 0.455, 0.509, 0.107),
]
PUBLISHED_ABLATION = [
    ("no-ctr", "crop_resize", 0.413, 0.461, 0.104), ("no-ctr", "mask_guided", 0.431, 0.484, 0.110),
    ("no-ctr", "masked", 0.407, 0.464, 0.123), ("ctr", "crop_resize", 0.420, 0.469, 0.105),
    ("ctr", "masked", 0.416, 0.479, 0.132), ("ctr", "mask_guided", 0.441, 0.494, 0.108),
]


def random_outcome_sets(rng, n_sets=200):
    """Outcome lists mixing failures, exact hits, and partial overlaps over two lesion types."""
    from lesiontrack.evaluation import PairOutcome

    sets = []
    for s in range(n_sets):
        n = int(rng.integers(1, 300))
        ious = rng.uniform(0, 1, n)
        ious[rng.uniform(size=n) < rng.uniform(0, 0.5)] = 0.0
        ious[rng.uniform(size=n) < 0.05] = 1.0
        if s == 0:
            ious[:] = 0.0
        types = rng.choice(["mass", "calcification"], n)
        sets.append([PairOutcome(f"p{i}", float(v), float(rng.uniform(0, 20)), str(t))
                     for i, (v, t) in enumerate(zip(ious, types))])
    return sets
