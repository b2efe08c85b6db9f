"""Benchmark metrics: AO, accuracy, robustness, center L2, success curve and AUC."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import BoundingBox, center_distance, iou

THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class PairOutcome:
    pair_id: str
    iou: float
    center_l2_mm: float
    lesion_type: str = "mass"

    def __post_init__(self):
        if not (math.isfinite(self.iou) and math.isfinite(self.center_l2_mm)):
            raise ValueError(f"non-finite outcome for {self.pair_id}")


@dataclass
class Metrics:
    ao: float
    accuracy: float
    robustness: float
    mean_l2_mm: float
    auc: float
    curve: list
    n: int

    def summary(self) -> dict:
        return {"ao": self.ao, "accuracy": self.accuracy, "robustness": self.robustness,
                "mean_l2_mm": self.mean_l2_mm, "auc": self.auc, "n": self.n}


@dataclass
class MetricsReport:
    overall: Metrics
    per_type: dict = field(default_factory=dict)
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "overall": self.overall.summary(),
            "per_type": {k: {**m.summary(), "curve": m.curve} for k, m in sorted(self.per_type.items())},
            "curve": self.overall.curve,
        }

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        def metrics(s, curve):
            return Metrics(s["ao"], s["accuracy"], s["robustness"], s["mean_l2_mm"], s["auc"],
                           [list(p) for p in curve], s["n"])
        per = {k: metrics(v, v["curve"]) for k, v in d.get("per_type", {}).items()}
        return cls(metrics(d["overall"], d["curve"]), per, d.get("method", ""))


def score_pair(pred: BoundingBox, gt: BoundingBox, spacing_mm: float, pair_id: str = "",
               lesion_type: str = "mass") -> PairOutcome:
    return PairOutcome(pair_id, iou(pred, gt), center_distance(pred, gt, spacing_mm), lesion_type)


def success_curve(ious) -> list:
    """Fraction of pairs with IoU >= t for each threshold; t = 0 counts IoU > 0."""
    ious = np.asarray(ious, dtype=np.float64)
    rates = [float(np.mean(ious > 0)) if t == 0 else float(np.mean(ious >= t)) for t in THRESHOLDS]
    return [[float(t), r] for t, r in zip(THRESHOLDS, rates)]


def _metrics(outcomes) -> Metrics:
    ious = np.array([o.iou for o in outcomes])
    success = ious > 0
    n = len(ious)
    curve = success_curve(ious)
    rates = np.array([r for _, r in curve])
    return Metrics(
        ao=float(ious.sum() / n),
        accuracy=float(ious[success].sum() / success.sum()) if success.any() else 0.0,
        robustness=float((n - success.sum()) / n),
        mean_l2_mm=float(np.mean([o.center_l2_mm for o in outcomes])),
        auc=float(np.trapezoid(rates, THRESHOLDS)),
        curve=curve,
        n=n,
    )


def aggregate(outcomes, method: str = "") -> MetricsReport:
    """Failure means IoU exactly 0; accuracy averages over the rest."""
    outcomes = list(outcomes)
    if not outcomes:
        raise DataError("cannot aggregate an empty outcome set")
    per = {}
    for lt in sorted({o.lesion_type for o in outcomes}):
        per[lt] = _metrics([o for o in outcomes if o.lesion_type == lt])
    return MetricsReport(_metrics(outcomes), per, method)


# -- report files --------------------------------------------------------------

def write_metrics_json(report: MetricsReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_metrics_json(path) -> MetricsReport:
    try:
        with open(path) as fh:
            return MetricsReport.from_dict(json.load(fh))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read metrics ({exc})") from None


def write_curve_csv(report: MetricsReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "rate"])
        for t, r in report.overall.curve:
            w.writerow([f"{t:.2f}", repr(r)])


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def success_plot_svg(reports: list[MetricsReport], title: str = "Success plot") -> str:
    """One polyline per report on [0, 1]^2 axes, legend with AUC values."""
    w, h, m = 480, 360, 50
    pw, ph = w - 2 * m, h - 2 * m

    def xy(t, r):
        return f"{m + t * pw:.2f},{m + (1 - r) * ph:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        v = k / 5
        out.append(f'<text x="{m + v * pw:.1f}" y="{h - m + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{v:.1f}</text>')
        out.append(f'<text x="{m - 6}" y="{m + (1 - v) * ph + 3:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{v:.1f}</text>')
    out.append(f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="11">IoU threshold</text>')
    out.append(f'<text x="14" y="{h / 2}" text-anchor="middle" font-family="sans-serif" font-size="11" '
               f'transform="rotate(-90 14 {h / 2})">Success rate</text>')
    for i, rep in enumerate(reports):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(xy(t, r) for t, r in rep.overall.curve)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = m + 14 + 16 * i
        out.append(f'<line x1="{w - m - 150}" y1="{ly}" x2="{w - m - 130}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        label = rep.method or f"run {i}"
        out.append(f'<text x="{w - m - 125}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f'{label} [{rep.overall.auc:.3f}]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports, out_dir, stem: str = "metrics") -> dict:
    """Writes per-report JSON and CSV plus one SVG with every curve."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for rep in reports:
            tag = f"{stem}_{rep.method}" if rep.method and len(reports) > 1 else stem
            jp = os.path.join(out_dir, f"{tag}.json")
            cp = os.path.join(out_dir, f"{tag}_curve.csv")
            write_metrics_json(rep, jp)
            write_curve_csv(rep, cp)
            paths[rep.method or stem] = {"json": jp, "csv": cp}
        svg = os.path.join(out_dir, "success_plot.svg")
        with open(svg, "w") as fh:
            fh.write(success_plot_svg(reports))
        paths["svg"] = svg
        return paths
    except OSError as exc:
        raise DataError(f"cannot write report under {out_dir}: {exc}") from None
