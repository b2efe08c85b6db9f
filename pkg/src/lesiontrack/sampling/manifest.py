"""Case manifest (JSON) and exhaustive lesion-pair enumeration."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import combinations

from ..errors import DataError, GeometryError
from ..geometry import BoundingBox

LESION_TYPES = ("mass", "calcification")


@dataclass
class TimePoint:
    index: int
    image: str
    box: BoundingBox


@dataclass
class View:
    view_id: str
    timepoints: list[TimePoint]


@dataclass
class Case:
    id: str
    lesion_type: str
    views: list[View]
    split: str = "test"


@dataclass
class CaseManifest:
    cases: list[Case]
    spacing_mm: float
    root: str = "."

    def image_path(self, tp: TimePoint) -> str:
        return tp.image if os.path.isabs(tp.image) else os.path.join(self.root, tp.image)

    def subset(self, split: str | None) -> "CaseManifest":
        if split in (None, "all"):
            return self
        return CaseManifest([c for c in self.cases if c.split == split], self.spacing_mm, self.root)


@dataclass(frozen=True)
class Pair:
    pair_id: str
    case_id: str
    view_id: str
    lesion_type: str
    template: TimePoint = field(compare=False)
    search: TimePoint = field(compare=False)


def enumerate_pairs(manifest: CaseManifest, later_as_template: bool = True) -> list[Pair]:
    """Every unordered time-point pair of each view, n(n-1)/2 per view."""
    pairs = []
    for case in manifest.cases:
        for view in case.views:
            tps = sorted(view.timepoints, key=lambda t: t.index)
            for early, late in combinations(tps, 2):
                tmpl, srch = (late, early) if later_as_template else (early, late)
                pid = f"{case.id}/{view.view_id}/{tmpl.index}-{srch.index}"
                pairs.append(Pair(pid, case.id, view.view_id, case.lesion_type, tmpl, srch))
    return pairs


def manifest_to_dict(m: CaseManifest) -> dict:
    return {
        "spacing_mm": m.spacing_mm,
        "cases": [
            {
                "id": c.id,
                "lesion_type": c.lesion_type,
                "split": c.split,
                "views": [
                    {
                        "view_id": v.view_id,
                        "timepoints": [
                            {"index": t.index, "image": t.image, "box": t.box.to_dict()}
                            for t in v.timepoints
                        ],
                    }
                    for v in c.views
                ],
            }
            for c in m.cases
        ],
    }


def _req(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise DataError(f"manifest: missing field {where}.{key}")
    return d[key]


def manifest_from_dict(d: dict, root: str = ".") -> CaseManifest:
    spacing = _req(d, "spacing_mm", "<root>")
    if not isinstance(spacing, (int, float)) or spacing <= 0:
        raise DataError("manifest: field spacing_mm must be a positive number")
    cases = []
    for ci, cd in enumerate(_req(d, "cases", "<root>")):
        cw = f"cases[{ci}]"
        lt = _req(cd, "lesion_type", cw)
        if lt not in LESION_TYPES:
            raise DataError(f"manifest: field {cw}.lesion_type must be one of {LESION_TYPES}, got {lt!r}")
        views = []
        for vi, vd in enumerate(_req(cd, "views", cw)):
            vw = f"{cw}.views[{vi}]"
            tps = []
            for ti, td in enumerate(_req(vd, "timepoints", vw)):
                tw = f"{vw}.timepoints[{ti}]"
                bd = _req(td, "box", tw)
                for k in ("cx", "cy", "w", "h"):
                    _req(bd, k, f"{tw}.box")
                try:
                    box = BoundingBox.from_dict(bd)
                except (GeometryError, TypeError, ValueError) as exc:
                    raise DataError(f"manifest: field {tw}.box invalid: {exc}") from None
                tps.append(TimePoint(int(_req(td, "index", tw)), str(_req(td, "image", tw)), box))
            idx = [t.index for t in tps]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise DataError(f"manifest: field {vw}.timepoints must be strictly ordered by index, got {idx}")
            views.append(View(str(_req(vd, "view_id", vw)), tps))
        cases.append(Case(str(_req(cd, "id", cw)), lt, views, str(cd.get("split", "test"))))
    return CaseManifest(cases, float(spacing), root)


def save_manifest(m: CaseManifest, path):
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(m), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path, check_files: bool = True) -> CaseManifest:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    m = manifest_from_dict(d, root=os.path.dirname(os.path.abspath(path)))
    if check_files:
        missing = [m.image_path(t) for c in m.cases for v in c.views for t in v.timepoints
                   if not os.path.exists(m.image_path(t))]
        if missing:
            raise DataError(f"manifest references missing image files: {', '.join(missing)}")
    return m


def pair_summary(m: CaseManifest) -> dict:
    """Case / view / pair counts per split and lesion type."""
    out = {}
    for case in m.cases:
        row = out.setdefault(case.split, {}).setdefault(case.lesion_type, {"cases": 0, "views": 0, "pairs": 0})
        row["cases"] += 1
        row["views"] += len(case.views)
        row["pairs"] += sum(len(v.timepoints) * (len(v.timepoints) - 1) // 2 for v in case.views)
    return out
