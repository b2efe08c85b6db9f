import hashlib
import json
import os
from itertools import combinations

import numpy as np
import pytest

from lesiontrack.errors import ConfigError, DataError
from lesiontrack.geometry import FULL, BoundingBox, FrameMeta, box_to_frame
from lesiontrack.image import Image, read_pgm, write_pgm
from lesiontrack.sampling import (Case, CaseManifest, PatchSpec, SynthConfig, TimePoint, View, enumerate_pairs,
                                  extract_search, extract_template, load_manifest, make_mask_channel,
                                  manifest_from_dict, manifest_to_dict, pair_summary, save_manifest,
                                  synth_cases, synth_generate)

FULL_SCALE = PatchSpec()
DESK = PatchSpec(template_px=128, search_px=256, spacing_mm=0.28)


class TestPatchSpec:
    def test_full_scale_crop_sizes(self):
        assert (FULL_SCALE.template_crop_px, FULL_SCALE.search_crop_px) == (1143, 1571)

    def test_desk_crop_sizes(self):
        assert (DESK.template_crop_px, DESK.search_crop_px) == (286, 393)

    @pytest.mark.parametrize("kw", [{"search_extent_mm": 70.0}, {"spacing_mm": 0.0}, {"template_px": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PatchSpec(**kw)


class TestMask:
    def test_full_patch(self):
        m, ok = make_mask_channel(BoundingBox(4, 4, 8, 8), 8)
        assert ok and m.all()

    def test_corner_box(self):
        m, ok = make_mask_channel(BoundingBox.from_corners(0, 0, 2, 2), 8)
        assert ok and m.sum() == 4 and m[:2, :2].all()

    def test_offscreen(self):
        m, ok = make_mask_channel(BoundingBox(-50, -50, 4, 4), 8)
        assert not ok and not m.any()

    def test_binary(self):
        m, _ = make_mask_channel(BoundingBox(3.3, 4.7, 2.6, 5.1), 10)
        assert set(np.unique(m)) <= {0.0, 1.0}

    @pytest.mark.parametrize("w,h", [(20.0, 20.0), (31.0, 17.0), (8.4, 40.2)])
    def test_centroid_at_center(self, w, h):
        m, _ = make_mask_channel(BoundingBox(64, 64, w, h), 128)
        rows, cols = np.nonzero(m)
        # pixel centers sit at +0.5
        assert abs(cols.mean() + 0.5 - 64) <= 0.5 and abs(rows.mean() + 0.5 - 64) <= 0.5


def _constant(n, v=0.5, spacing=0.07):
    return Image(np.full((n, n), v), spacing)


class TestTemplate:
    def test_centered_lesion_mask_size(self):
        n = 2000
        gt = BoundingBox(n / 2, n / 2, 20 / 0.07, 20 / 0.07)
        t = extract_template(_constant(n), gt, FULL_SCALE, "mask_guided")
        assert t.mask.shape == (512, 512)
        rows = np.flatnonzero(t.mask.any(axis=1))
        assert abs(len(rows) - 128) <= 1
        assert abs(t.box.cx - 256) < 1e-9

    def test_masked_constant(self):
        img = _constant(600, 0.4, 0.28)
        t = extract_template(img, BoundingBox(300, 300, 40, 30), DESK, "masked")
        np.testing.assert_allclose(t.image, 0.4 * t.mask, atol=1e-12)

    def test_crop_resize_has_no_mask(self):
        t = extract_template(_constant(600, 0.4, 0.28), BoundingBox(300, 300, 40, 30), DESK, "crop_resize")
        assert t.mask is None

    def test_corner_lesion_padded(self):
        img = _constant(512, 0.6, 0.28)
        gt = BoundingBox(10, 10, 20, 20)
        t = extract_template(img, gt, DESK, "mask_guided")
        assert t.image[0, 0] == 0.0
        # the mask follows the box, not the padding
        ref = extract_template(_constant(2048, 0.6, 0.28), BoundingBox(1000, 1000, 20, 20), DESK, "mask_guided")
        np.testing.assert_array_equal(t.mask, ref.mask)

    def test_oversized_flag(self):
        big = BoundingBox(500, 500, 90 / 0.28, 30)
        img = _constant(1000, 0.5, 0.28)
        assert extract_template(img, big, DESK, "mask_guided").oversized
        assert not extract_template(img, BoundingBox(500, 500, 40, 40), DESK, "mask_guided").oversized
        cr = extract_template(img, big, DESK, "crop_resize")
        assert cr.frame.scale == pytest.approx(DESK.template_px / big.w)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            extract_template(_constant(100), BoundingBox(50, 50, 4, 4), DESK, "cropped")


class TestSearch:
    def test_centered_no_padding(self):
        img = Image(np.random.default_rng(0).uniform(0.1, 1, (2000, 2000)), 0.07)
        s = extract_search(img, (1000, 1000), FULL_SCALE)
        assert s.image.min() > 0 and not s.flags

    def test_gt_at_center(self):
        s = extract_search(_constant(3000), (1500, 1500), FULL_SCALE, BoundingBox(1500, 1500, 50, 50))
        assert (s.gt_box.cx, s.gt_box.cy) == pytest.approx((512, 512))

    def test_offset_10mm(self):
        s = extract_search(_constant(3000), (1500, 1500), FULL_SCALE, BoundingBox(1500 + 10 / 0.07, 1500, 50, 50))
        assert s.gt_box.cx == pytest.approx(512 + 10 / 0.07 * 1024 / 1571)
        assert s.gt_box.cx == pytest.approx(605.1, abs=0.05)

    def test_center_outside_flagged(self):
        s = extract_search(_constant(100, spacing=0.28), (-500, 50), DESK)
        assert "center_outside_image" in s.flags

    def test_inverse_mapping(self):
        rng = np.random.default_rng(5)
        img = _constant(512, 0.5, 0.28)
        for _ in range(20):
            gt = BoundingBox(*rng.uniform(150, 350, 2), *rng.uniform(10, 60, 2))
            s = extract_search(img, gt.as_array()[:2] + rng.uniform(-30, 30, 2), DESK, gt)
            back = box_to_frame(s.gt_box, s.frame, FrameMeta(FULL))
            np.testing.assert_allclose(back.as_array(), gt.as_array(), atol=0.1)


def _view(n):
    return View("V0", [TimePoint(i, f"t{i}.pgm", BoundingBox(10, 10, 5, 5)) for i in range(n)])


class TestPairs:
    @pytest.mark.parametrize("n,want", [(1, 0), (2, 1), (3, 3), (5, 10)])
    def test_counts(self, n, want):
        m = CaseManifest([Case("c", "mass", [_view(n)])], 0.28)
        assert len(enumerate_pairs(m)) == want

    def test_counts_match_double_loop(self):
        for n in range(1, 11):
            m = CaseManifest([Case("c", "mass", [_view(n), _view(n)])], 0.28)
            brute = sum(1 for _ in range(2) for i in range(n) for j in range(n) if i < j)
            assert len(enumerate_pairs(m)) == brute

    def test_orientation(self):
        m = CaseManifest([Case("c", "mass", [_view(3)])], 0.28)
        for p in enumerate_pairs(m):
            assert p.template.index > p.search.index
        for p in enumerate_pairs(m, later_as_template=False):
            assert p.template.index < p.search.index
        got = {(p.template.index, p.search.index) for p in enumerate_pairs(m)}
        assert got == {(j, i) for i, j in combinations(range(3), 2)}


class TestManifest:
    def _one(self):
        return CaseManifest([Case("c0", "calcification", [_view(2)], "train")], 0.28)

    def test_roundtrip(self, tmp_path):
        m = self._one()
        p = tmp_path / "m.json"
        save_manifest(m, p)
        back = load_manifest(p, check_files=False)
        assert manifest_to_dict(back) == manifest_to_dict(m)

    def test_missing_image_listed(self, tmp_path):
        p = tmp_path / "m.json"
        save_manifest(self._one(), p)
        with pytest.raises(DataError, match="t0.pgm"):
            load_manifest(p)

    @pytest.mark.parametrize("path,field", [
        (("cases", 0, "lesion_type"), "cases[0].lesion_type"),
        (("cases", 0, "views", 0, "timepoints", 1, "box", "w"), "cases[0].views[0].timepoints[1].box"),
    ])
    def test_schema_errors_name_field(self, path, field):
        d = manifest_to_dict(self._one())
        cur = d
        for k in path[:-1]:
            cur = cur[k]
        del cur[path[-1]]
        with pytest.raises(DataError, match=field.replace("[", r"\[").replace("]", r"\]")):
            manifest_from_dict(d)

    def test_unordered_timepoints(self):
        d = manifest_to_dict(self._one())
        d["cases"][0]["views"][0]["timepoints"][1]["index"] = 0
        with pytest.raises(DataError, match="strictly ordered"):
            manifest_from_dict(d)

    def test_summary_counts(self):
        cases = [Case(f"c{i}", "mass" if i % 2 else "calcification", [_view(3)], "train") for i in range(6)]
        s = pair_summary(CaseManifest(cases, 0.28))
        assert s["train"]["mass"] == {"cases": 3, "views": 3, "pairs": 9}


def test_pgm_roundtrip(tmp_path):
    a = np.random.default_rng(0).uniform(size=(7, 5))
    write_pgm(tmp_path / "a.pgm", a)
    b = read_pgm(tmp_path / "a.pgm", 0.28)
    assert b.spacing_mm == 0.28
    np.testing.assert_allclose(b.data, a, atol=0.5 / 65535 + 1e-12)
    with open(tmp_path / "a.pgm", "rb") as fh:
        assert fh.read(2) == b"P5"
    with pytest.raises(DataError):
        read_pgm(tmp_path / "missing.pgm")


SMALL = dict(image_px=256, n_cases=3, timepoints=3, lesion_size_mm=(5.0, 15.0), tx_range=(-15.0, 15.0),
             ty_range=(-15.0, 15.0))


class TestSynth:
    def test_deterministic_and_seed_sensitive(self):
        cfg = SynthConfig(**SMALL)
        c1, im1 = synth_cases(cfg, 5)
        c2, im2 = synth_cases(cfg, 5)
        _, im3 = synth_cases(cfg, 6)
        assert all(np.array_equal(a, b) for x, y in zip(im1, im2) for a, b in zip(x, y))
        assert [manifest_to_dict(CaseManifest(c1, 1.0))] == [manifest_to_dict(CaseManifest(c2, 1.0))]
        assert not np.array_equal(im1[0][0], im3[0][0])

    def test_jobs_do_not_change_output(self):
        cfg = SynthConfig(**SMALL)
        _, a = synth_cases(cfg, 9, jobs=1)
        _, b = synth_cases(cfg, 9, jobs=2)
        assert all(np.array_equal(x, y) for u, v in zip(a, b) for x, y in zip(u, v))

    def test_degenerate_config_identical(self):
        cfg = SynthConfig(image_px=256, n_cases=2, timepoints=2, tx_range=(0, 0), ty_range=(0, 0),
                          rotation_deg=(0, 0), scale_range=(1, 1), size_drift=0, intensity_drift=0,
                          lesion_shift_mm=0, noise_std=0)
        cases, imgs = synth_cases(cfg, 1)
        for c, ims in zip(cases, imgs):
            assert np.array_equal(ims[0], ims[1])
            tp = c.views[0].timepoints
            assert tp[0].box == tp[1].box

    def test_translation_only(self):
        cfg = SynthConfig(image_px=256, n_cases=2, timepoints=2, tx_range=(20, 20), ty_range=(0, 0),
                          rotation_deg=(0, 0), scale_range=(1, 1), size_drift=0, intensity_drift=0,
                          lesion_shift_mm=0, lesion_size_mm=(5, 10))
        cases, _ = synth_cases(cfg, 2)
        for c in cases:
            b0, b1 = (t.box for t in c.views[0].timepoints)
            assert b1.cx == pytest.approx(b0.cx + 20) and b1.cy == pytest.approx(b0.cy)
            assert (b1.w, b1.h) == pytest.approx((b0.w, b0.h))

    def test_generate_writes_images(self, tmp_path):
        cfg = SynthConfig(**SMALL)
        m = synth_generate(cfg, 3, tmp_path)
        save_manifest(m, tmp_path / "manifest.json")
        back = load_manifest(tmp_path / "manifest.json")
        assert len(enumerate_pairs(back)) == 9
        img = read_pgm(back.image_path(back.cases[0].views[0].timepoints[0]), back.spacing_mm)
        assert img.data.shape == (256, 256)

    def test_boxes_inside_image(self):
        cases, _ = synth_cases(SynthConfig(**{**SMALL, "n_cases": 6}), 4)
        for c in cases:
            for t in c.views[0].timepoints:
                x1, y1, x2, y2 = t.box.corners
                assert x1 >= 0 and y1 >= 0 and x2 <= 256 and y2 <= 256

    def test_lesion_is_bright_inside_box(self):
        cfg = SynthConfig(**{**SMALL, "n_cases": 4, "timepoints": 1, "calc_fraction": 0.0, "noise_std": 0})
        cases, imgs = synth_cases(cfg, 8)
        for c, ims in zip(cases, imgs):
            b = c.views[0].timepoints[0].box
            r, q = int(b.cy), int(b.cx)
            assert ims[0][r, q] > np.median(ims[0][ims[0] > 0])

    def test_placement_failure(self):
        cfg = SynthConfig(image_px=64, n_cases=1, timepoints=2, spacing_mm=0.28, lesion_size_mm=(60, 60))
        with pytest.raises(DataError):
            synth_cases(cfg, 0)
