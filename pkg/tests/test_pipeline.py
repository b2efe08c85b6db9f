import numpy as np
import pytest
import torch

from helpers import synthetic_pair
from lesiontrack.errors import ConfigError
from lesiontrack.geometry import FULL, BoundingBox, iou
from lesiontrack.image import Image
from lesiontrack.pipeline import PipelineConfig, TrackResult, select_candidate, track, track_pairs
from lesiontrack.refine import RefineCandidate, RefineConfig, make_refiner
from lesiontrack.sampling import SynthConfig, enumerate_pairs, synth_generate
from lesiontrack.tracknet import BackboneConfig, make_tracker

CFG = PipelineConfig()


def _cand(sim, cls):
    return RefineCandidate(BoundingBox(5, 5, 2, 2, "search"), cls, sim)


class TestSelection:
    def test_tie_break_on_cls(self):
        cands = [_cand(s, c) for s, c in zip([0.2, 0.9, 0.9], [0.5, 0.3, 0.6])]
        assert select_candidate(cands) is cands[2]

    def test_tie_break_on_index(self):
        cands = [_cand(0.7, 0.4), _cand(0.7, 0.4)]
        assert select_candidate(cands) is cands[0]

    def test_fused(self):
        cands = [_cand(0.9, 0.2), _cand(0.8, 0.6)]
        assert select_candidate(cands) is cands[0]
        assert select_candidate(cands, "fused") is cands[1]

    def test_empty(self):
        assert select_candidate([]) is None

    def test_unknown_selection(self):
        with pytest.raises(ConfigError):
            PipelineConfig(selection="vote")


@pytest.fixture(scope="module")
def pair():
    return synthetic_pair(3)


@pytest.fixture(scope="module")
def models():
    tracker = make_tracker(BackboneConfig(), 0)
    with torch.no_grad():
        tracker.cls_out.bias.zero_()  # scores near 0.5 so candidates survive the filter
    return tracker, make_refiner(RefineConfig())


class TestTrack:
    def test_identity_registration_is_exact(self, pair):
        t_img, gt_t, _, _ = pair
        res = track(t_img, gt_t, t_img, None, None, PipelineConfig(method="affine"))
        assert res.stage == "registration" and res.box.frame == FULL
        assert iou(res.box, gt_t) == pytest.approx(1.0, abs=1e-6)

    def test_large_lesion_bypass(self, pair):
        t_img, _, s_img, _ = pair
        big = BoundingBox(256, 256, 90 / 0.28, 60 / 0.28)
        res = track(t_img, big, s_img, None, None, CFG)
        assert res.stage == "bypass" and "large_lesion" in res.flags and res.box.frame == FULL

    def test_needs_weights(self, pair):
        t_img, gt_t, s_img, _ = pair
        with pytest.raises(ConfigError):
            track(t_img, gt_t, s_img, None, None, PipelineConfig(method="tracker"))

    def test_spacing_mismatch(self, pair):
        t_img, gt_t, s_img, _ = pair
        with pytest.raises(ConfigError):
            track(Image(t_img.data, 0.5), gt_t, s_img, None, None, CFG)

    def test_full_cascade_frames_and_determinism(self, pair, models):
        t_img, gt_t, s_img, _ = pair
        a = track(t_img, gt_t, s_img, *models, CFG)
        b = track(t_img, gt_t, s_img, *models, CFG)
        assert a.to_dict() == b.to_dict()
        assert a.stage == "refined" and a.box.frame == FULL
        assert 0 <= a.similarity <= 1 and a.diagnostics["candidate_count"] >= 1

    def test_no_candidates_falls_back_to_top1(self, pair):
        # an untrained head scores everything near its 0.01 prior, below the 0.05 cut
        t_img, gt_t, s_img, _ = pair
        res = track(t_img, gt_t, s_img, make_tracker(BackboneConfig(), 0), make_refiner(RefineConfig()), CFG)
        assert res.stage == "tracker_only" and "no_candidates" in res.flags

    def test_tracker_only_is_top1_in_full_frame(self, pair, models):
        t_img, gt_t, s_img, _ = pair
        res = track(t_img, gt_t, s_img, *models, PipelineConfig(method="tracker"))
        assert res.stage == "tracker_only" and res.box.frame == FULL
        # the search patch spans about 110 mm; the tracked box stays inside the image neighborhood
        assert -400 < res.box.cx < 912 and -400 < res.box.cy < 912

    def test_result_roundtrip(self, pair, models):
        t_img, gt_t, s_img, _ = pair
        res = track(t_img, gt_t, s_img, *models, CFG)
        assert TrackResult.from_dict(res.to_dict()).to_dict() == res.to_dict()

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            TrackResult(BoundingBox(1, 1, 1, 1), "done")


def test_track_pairs_independent_of_jobs(tmp_path, models):
    m = synth_generate(SynthConfig(n_cases=2, timepoints=2), 5, tmp_path)
    pairs = enumerate_pairs(m)
    one = track_pairs(m, pairs, *models, CFG, jobs=1)
    two = track_pairs(m, pairs, *models, CFG, jobs=2)
    assert [p for p, _, _ in one] == [p.pair_id for p in pairs]
    assert [r.to_dict() for _, r, _ in one] == [r.to_dict() for _, r, _ in two]


def test_missing_image_marks_failure(tmp_path):
    m = synth_generate(SynthConfig(n_cases=1, timepoints=2), 5, tmp_path)
    pairs = enumerate_pairs(m)
    (tmp_path / pairs[0].search.image).unlink()
    (_, res, _), = track_pairs(m, pairs, None, None, PipelineConfig(method="affine"))
    assert res.stage == "failed" and "missing_image" in res.flags
