import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionregister.errors import ContractError
from fusionregister.metrics import (
    SSIM_C1,
    average_gradient,
    entropy,
    evaluate_run,
    iou,
    pr_score,
    prior_map,
    prompted_segment,
    segmented_pairs,
    spatial_frequency,
    std_dev,
    to_gray,
)

import oracles


def half_split(h=8, w=8):
    g = np.zeros((h, w))
    g[:, w // 2 :] = 1.0
    return g


class TestQuality:
    @pytest.mark.parametrize("fn", [entropy, spatial_frequency, average_gradient, std_dev])
    def test_constant_is_zero(self, fn):
        assert fn(np.full((7, 9), 0.4)) == pytest.approx(0.0, abs=1e-12)

    def test_entropy_examples(self):
        assert entropy(half_split()) == pytest.approx(1.0)
        assert entropy((np.arange(256) / 255.0).reshape(256, 1)) == pytest.approx(8.0)

    def test_checkerboard_sf(self):
        g = (np.indices((8, 8)).sum(0) % 2).astype(float)
        assert spatial_frequency(g) == pytest.approx(math.sqrt(2))

    def test_ramp_ag(self):
        s = 0.03
        g = np.tile(np.arange(10) * s, (6, 1))
        assert average_gradient(g) == pytest.approx(s / math.sqrt(2))

    def test_half_split_sd(self):
        assert std_dev(half_split()) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_against_loops(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(8, 33, size=2)
        g = rng.random((h, w))
        assert entropy(g) == pytest.approx(oracles.entropy_naive(g), abs=1e-9)
        assert spatial_frequency(g) == pytest.approx(oracles.spatial_frequency_naive(g), abs=1e-9)
        assert average_gradient(g) == pytest.approx(oracles.average_gradient_naive(g), abs=1e-9)
        assert std_dev(g) == pytest.approx(oracles.std_naive(g), abs=1e-12)

    def test_colour_uses_601_luma(self):
        img = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        img[:, 2] = 1.0
        assert to_gray(img) == pytest.approx(np.full((2, 2), 0.114))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_entropy_bounds(self, seed):
        g = np.random.default_rng(seed).random((16, 16))
        assert 0 <= entropy(g) <= 8

    def test_invariant_under_batch_replication(self):
        img = torch.rand(1, 3, 12, 12, dtype=torch.float64)
        rep = img.expand(3, -1, -1, -1)
        for fn in (entropy, spatial_frequency, average_gradient, std_dev):
            assert fn(rep) == fn(img)


class TestMasks:
    def test_iou_cases(self):
        a = np.zeros((4, 4), bool)
        a[:2, :2] = True
        b = np.zeros((4, 4), bool)
        b[1:3, 1:3] = True
        assert iou(a, a) == 1.0
        assert iou(a, b) == pytest.approx(1 / 7)
        assert iou(a, ~a) == 0.0
        assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0

    def test_iou_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.random((2, 9, 9)) < 0.4
            assert iou(a, b) == iou(b, a)
            assert 0 <= iou(a, b) <= 1

    def test_iou_shape_mismatch(self):
        with pytest.raises(ContractError):
            iou(np.zeros((3, 3), bool), np.zeros((3, 4), bool))

    def test_masks_must_be_boolean(self):
        with pytest.raises(ContractError):
            iou(np.zeros((3, 3)), np.zeros((3, 3)))

    def test_pr(self):
        ref = np.zeros((4, 4), bool)
        ref[:2] = True
        assert pr_score(ref, ref) == 1.0
        assert pr_score(~ref, ref) == 0.0
        assert pr_score(np.zeros_like(ref), ref) == 0.0
        # pred covers half of ref and nothing else: P = 1, R = 0.5
        pred = np.zeros_like(ref)
        pred[0] = True
        assert pr_score(pred, ref) == pytest.approx(2 * 0.5 / 1.5)
        # P = R = 0.5
        pred = np.zeros_like(ref)
        pred[1:3] = True
        assert pr_score(pred, ref) == pytest.approx(0.5)

    def test_pr_empty_reference(self):
        with pytest.raises(ContractError):
            pr_score(np.ones((2, 2), bool), np.zeros((2, 2), bool))


class TestPromptedSegment:
    def scene(self):
        img = np.full((16, 16), 0.2)
        img[4:8, 4:8] = 0.9
        img[12:15, 12:15] = 0.9
        return img

    def test_stays_inside_grown_prompt(self):
        prompt = np.zeros((16, 16), bool)
        prompt[5:7, 5:7] = True
        seg = prompted_segment(self.scene(), prompt, level=0.5, margin=2)
        expected = np.zeros((16, 16), bool)
        expected[4:8, 4:8] = True
        assert np.array_equal(seg, expected)

    def test_zero_margin(self):
        prompt = np.zeros((16, 16), bool)
        prompt[5:7, 5:7] = True
        assert np.array_equal(prompted_segment(self.scene(), prompt, margin=0), prompt)

    def test_level_is_strict(self):
        prompt = np.ones((16, 16), bool)
        assert not prompted_segment(self.scene(), prompt, level=0.9).any()

    def test_pairs_score_the_image(self):
        ref = np.zeros((16, 16), bool)
        ref[4:8, 4:8] = True
        moved = np.roll(ref, 1, axis=1)
        img = self.scene()
        shifted = np.roll(img, 1, axis=1)
        (_, seg_ok), = segmented_pairs(img, [(ref, moved)])
        (_, seg_bad), = segmented_pairs(shifted, [(ref, moved)])
        assert iou(seg_ok, ref) == 1.0
        assert iou(seg_bad, ref) == pytest.approx(12 / 20)

    def test_shape_check(self):
        with pytest.raises(ContractError):
            prompted_segment(np.zeros((4, 4)), np.zeros((4, 5), bool))


class TestPriorMap:
    def test_self_is_one(self):
        img = torch.rand(1, 3, 48, 40)
        pm = prior_map(img, img, patch=16, stride=8)
        assert pm.ssim.shape == ((48 - 16) // 8 + 1, (40 - 16) // 8 + 1)
        assert np.allclose(pm.ssim, 1.0)

    def test_constant_closed_form(self):
        a, b = 0.2, 0.7
        pm = prior_map(np.full((8, 8), a), np.full((8, 8), b), patch=8, stride=8)
        assert pm.ssim[0, 0] == pytest.approx((2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1))

    def test_localised_drop(self):
        rng = np.random.default_rng(0)
        tex = rng.random((64, 64))
        moved = tex.copy()
        moved[:, 32:] = np.roll(tex, 2, axis=1)[:, 32:]
        pm = prior_map(moved, tex, patch=16, stride=16).ssim
        assert np.allclose(pm[:, :2], 1.0)
        assert (pm[:, 2:] < 0.9).all()

    def test_values_in_range_and_upsampled(self):
        rng = np.random.default_rng(3)
        pm = prior_map(rng.random((32, 32)), rng.random((32, 32)), patch=8, stride=4)
        assert (pm.ssim >= -1).all() and (pm.ssim <= 1).all()
        assert pm.upsampled((32, 32)).shape == (32, 32)

    def test_patch_too_large(self):
        with pytest.raises(ContractError):
            prior_map(np.zeros((8, 8)), np.zeros((8, 8)), patch=9)


class TestEvaluateRun:
    def test_same_image_zero_deltas(self):
        img = torch.rand(1, 3, 16, 16)
        m = np.zeros((16, 16), bool)
        m[4:8, 4:8] = True
        rep = evaluate_run(img, img, [(m, m)])
        assert all(v == 0 for v in rep.deltas.values())
        assert rep.iou_before == 1.0 and rep.n_pairs == 1

    def test_perfect_correction(self):
        ref = np.zeros((16, 16), bool)
        ref[4:10, 4:10] = True
        shifted = np.roll(ref, 2, axis=1)
        img = torch.rand(1, 3, 16, 16)
        rep = evaluate_run(img, img, [(ref, shifted)], [(ref, ref)])
        assert rep.iou_after == 1.0 and rep.pr_after == 1.0
        assert rep.deltas["IoU"] == pytest.approx(1 - 24 / 48)

    def test_no_masks_warns(self, caplog):
        img = torch.rand(1, 3, 8, 8)
        rep = evaluate_run(img, img)
        assert rep.iou_before is None and rep.warnings
        assert [r[0] for r in rep.rows()] == ["EN", "SF", "AG", "SD"]
