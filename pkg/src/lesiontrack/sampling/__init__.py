from .manifest import (Case, CaseManifest, Pair, TimePoint, View, enumerate_pairs, load_manifest,
                       manifest_from_dict, manifest_to_dict, pair_summary, save_manifest)
from .patches import (VARIANTS, PatchPair, PatchSpec, SearchPatch, TemplatePatch, clamp_box, extract_search,
                      extract_template, make_mask_channel, resample, resize_bilinear, resize_nearest)
from .synth import SynthConfig, phantom, synth_cases, synth_generate

__all__ = [
    "Case", "CaseManifest", "Pair", "TimePoint", "View", "enumerate_pairs", "load_manifest",
    "manifest_from_dict", "manifest_to_dict", "pair_summary", "save_manifest",
    "VARIANTS", "PatchPair", "PatchSpec", "SearchPatch", "TemplatePatch", "clamp_box", "extract_search",
    "extract_template", "make_mask_channel", "resample", "resize_bilinear", "resize_nearest",
    "SynthConfig", "phantom", "synth_cases", "synth_generate",
]
