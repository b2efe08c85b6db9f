"""Run configuration: one JSON document, validated up front.

Precedence is flags > file > defaults. Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .pipeline import METHODS, SELECTIONS, PipelineConfig
from .refine import RefineConfig
from .registration import RegistrationConfig
from .sampling.patches import VARIANTS, PatchSpec
from .sampling.synth import SynthConfig
from .tracknet import BackboneConfig, LossWeights, TrainConfig, in_channels_for

MIN_MAP = 5


@dataclass(frozen=True)
class TrackSettings:
    method: str = "full"
    template_variant: str = "mask_guided"
    use_centerness: bool = True
    top_k: int = 32
    later_as_template: bool = True
    selection: str = "similarity"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"track.method must be one of {METHODS}, got {self.method!r}")
        if self.template_variant not in VARIANTS:
            raise ConfigError(f"track.template_variant must be one of {VARIANTS}, got {self.template_variant!r}")
        if self.top_k < 1:
            raise ConfigError("track.top_k must be >= 1")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"track.selection must be one of {SELECTIONS}, got {self.selection!r}")


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    work: str = "work"


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-5
    max_steps: int | None = None


@dataclass(frozen=True)
class RefineSettings:
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


# desk-scale defaults: 512 px images at 0.28 mm, 128/256 px patches
DESK_PATCH = {"template_px": 128, "search_px": 256, "spacing_mm": 0.28}

SECTIONS = {
    "patch": PatchSpec,
    "synth": SynthConfig,
    "backbone": BackboneConfig,
    "loss": LossWeights,
    "registration": RegistrationConfig,
    "tracker_train": TrainSettings,
    "refine": RefineSettings,
    "track": TrackSettings,
    "paths": Paths,
}


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_document() -> dict:
    doc = {"seed": None}
    for name, cls in SECTIONS.items():
        doc[name] = _defaults(cls)
    doc["patch"].update(DESK_PATCH)
    # in_channels follows the template variant unless set explicitly
    doc["backbone"]["in_channels"] = None
    return doc


def merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        path = f"{where}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[k] = merge(out[k], v, path + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_path(doc: dict, dotted: str, value) -> dict:
    upd: dict = {}
    cur = upd
    parts = dotted.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return merge(doc, upd)


def _build(cls, d: dict, name: str):
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    patch: PatchSpec
    synth: SynthConfig
    backbone: BackboneConfig
    loss: LossWeights
    registration: RegistrationConfig
    tracker_train: TrainSettings
    refine: RefineSettings
    track: TrackSettings
    paths: Paths
    document: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_document(cls, doc: dict) -> "RunConfig":
        doc = merge(default_document(), doc)
        seed = doc["seed"]
        if seed is None:
            seed = int(os.environ.get("TRACKER_SEED", "0"))
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
        doc["seed"] = seed
        track = _build(TrackSettings, doc["track"], "track")
        bb = dict(doc["backbone"])
        want = in_channels_for(track.template_variant)
        if bb["in_channels"] is None:
            bb["in_channels"] = want
        elif bb["in_channels"] != want:
            raise ConfigError(f"backbone.in_channels={bb['in_channels']} does not fit template variant "
                              f"{track.template_variant!r} (needs {want})")
        doc["backbone"] = bb
        built = {name: _build(c, doc[name], name) for name, c in SECTIONS.items() if name != "track"}
        rc = cls(seed=seed, track=track, document=doc, **built)
        rc.validate()
        return rc

    def validate(self):
        n = self.backbone.map_size(self.patch.search_px)
        if n < MIN_MAP:
            raise ConfigError(f"correlation map is {n}x{n}; need at least {MIN_MAP}x{MIN_MAP} "
                              f"(search_px={self.patch.search_px}, stride={self.backbone.total_stride})")
        if self.backbone.feature_size(self.patch.template_px) < self.backbone.crop:
            raise ConfigError("template feature map is smaller than backbone.crop")
        if abs(self.synth.spacing_mm - self.patch.spacing_mm) > 1e-9:
            raise ConfigError(f"synth.spacing_mm={self.synth.spacing_mm} differs from "
                              f"patch.spacing_mm={self.patch.spacing_mm}")
        self.refine_config()
        self.train_config()

    def to_document(self) -> dict:
        return copy.deepcopy(self.document)

    def train_config(self) -> TrainConfig:
        t = self.tracker_train
        return _build(TrainConfig, {"epochs": t.epochs, "batch_size": t.batch_size, "lr": t.lr,
                                    "seed": self.seed, "max_steps": t.max_steps}, "tracker_train")

    def refine_config(self) -> RefineConfig:
        kw = dataclasses.asdict(self.refine)
        bb = dataclasses.replace(self.backbone, in_channels=2)
        return _build(RefineConfig, {**kw, "seed": self.seed, "backbone": bb}, "refine")

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(spec=self.patch, variant=self.track.template_variant,
                              use_centerness=self.track.use_centerness, top_k=self.track.top_k,
                              method=self.track.method, selection=self.track.selection,
                              registration=self.registration,
                              refine=self.refine_config())


def load_document(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then dotted ``overrides``."""
    doc = default_document()
    if path:
        doc = merge(doc, load_document(path))
    for key, value in (overrides or {}).items():
        doc = set_path(doc, key, value)
    return RunConfig.from_document(doc)
