import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handpaint.conditioning import (
    FINGER_CHANNELS,
    Canvas,
    HandPlacementError,
    LayoutError,
    PoseCondition,
    Skeleton,
    assemble_canvas,
    downsize_to_latent,
    invert_canvas_mask,
    postprocess_mask,
    render_heatmaps,
    render_skeleton,
)

from oracles import dilate_bruteforce


def empty_hands():
    kps = np.zeros((2, 21, 3))
    return kps


def pixel_center(ix, size):
    return (ix + 0.5) / size


class TestRenderHeatmaps:
    def test_peak_is_one_at_keypoint_pixel(self):
        kps = empty_hands()
        # left thumb tip (keypoint 4) at the center of pixel (20, 12)
        kps[0, 4] = (pixel_center(20, 64), pixel_center(12, 64), 1)
        cond = render_heatmaps(kps, 64, sigma=2.0)
        ch = cond.heatmaps[0]
        assert ch[12, 20] == pytest.approx(1.0, abs=1e-6)
        assert ch.max() == pytest.approx(1.0, abs=1e-6)

    def test_invisible_right_hand_channels_zero(self):
        kps = empty_hands()
        kps[0, :, :] = 0.5
        kps[0, :, 2] = 1
        cond = render_heatmaps(kps, 32)
        assert cond.heatmaps[5:].max() == 0.0
        assert cond.heatmaps[:5].max() > 0.0

    def test_midpoint_of_two_keypoints_two_sigma_apart(self):
        sigma = 2.0
        kps = empty_hands()
        # two joints of the left index finger (channel 1), 2*sigma apart,
        # midpoint exactly at the center of pixel (30, 32)
        kps[0, 5] = (pixel_center(28, 64), pixel_center(32, 64), 1)
        kps[0, 6] = (pixel_center(32, 64), pixel_center(32, 64), 1)
        cond = render_heatmaps(kps, 64, sigma=sigma)
        mid = cond.heatmaps[1][32, 30]
        assert mid == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_out_of_range_clamped_and_flagged(self):
        kps = empty_hands()
        kps[0, 4] = (1.4, -0.2, 1)
        cond = render_heatmaps(kps, 16)
        assert cond.clamped_keypoints == 2
        assert cond.heatmaps[0].max() > 0

    def test_wrist_feeds_no_channel(self):
        kps = empty_hands()
        kps[0, 0] = (0.5, 0.5, 1)  # wrist only
        cond = render_heatmaps(kps, 32)
        assert cond.heatmaps.max() == 0.0

    def test_swapping_hands_permutes_channels(self):
        rng = np.random.default_rng(0)
        kps = rng.uniform(0.2, 0.8, size=(2, 21, 3))
        kps[..., 2] = 1
        a = render_heatmaps(kps, 32).heatmaps
        b = render_heatmaps(kps[::-1], 32).heatmaps
        assert np.array_equal(a[:5], b[5:])
        assert np.array_equal(a[5:], b[:5])

    def test_channel_order_documented(self):
        assert FINGER_CHANNELS[0] == "left_thumb"
        assert FINGER_CHANNELS[5] == "right_thumb"
        assert len(FINGER_CHANNELS) == 10

    def test_condition_stack_has_eleven_channels(self):
        cond = render_heatmaps(empty_hands(), 16)
        assert cond.channels().shape == (11, 16, 16)


class TestDownsizeToLatent:
    def test_identity_factor(self):
        x = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)
        assert np.array_equal(downsize_to_latent(x, 1), x)

    def test_factor_8_shape(self):
        x = np.zeros((1, 512, 512), dtype=np.float32)
        assert downsize_to_latent(x, 8).shape == (1, 64, 64)

    def test_constant_preserved(self):
        x = np.full((2, 32, 32), 0.37, dtype=np.float32)
        out = downsize_to_latent(x, 4)
        assert np.allclose(out, 0.37, atol=1e-6)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            downsize_to_latent(np.zeros((1, 30, 30)), 4)

    def test_binary_mask_becomes_soft(self):
        m = np.zeros((1, 8, 8), dtype=np.float32)
        m[0, :, 3:] = 1.0
        out = downsize_to_latent(m, 2)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.any((out > 0.0) & (out < 1.0))

    def test_composition_constant(self):
        x = np.full((1, 64, 64), 0.81, dtype=np.float32)
        a = downsize_to_latent(downsize_to_latent(x, 2), 4)
        b = downsize_to_latent(x, 8)
        assert np.allclose(a, b, atol=1e-6)

    def test_composition_linear_ramp(self):
        ramp = np.tile(np.arange(64, dtype=np.float32) / 63.0, (64, 1))[None]
        a = downsize_to_latent(downsize_to_latent(ramp, 2), 2)
        b = downsize_to_latent(ramp, 4)
        assert np.allclose(a, b, atol=1e-6)


def make_skeleton(kps=None):
    if kps is None:
        kps = np.zeros((44, 3))
    return Skeleton(np.asarray(kps, dtype=np.float64), "stick-44")


class TestRenderSkeleton:
    def test_no_visible_keypoints_black(self):
        img = render_skeleton(make_skeleton(), (96, 64))
        assert img.shape == (3, 96, 64)
        assert img.max() == 0.0

    def test_single_limb_colored(self):
        kps = np.zeros((44, 3))
        kps[0] = (0.5, 0.1, 1)   # head
        kps[1] = (0.5, 0.9, 1)   # pelvis
        img = render_skeleton(Skeleton(kps, "stick-44"), 64)
        # torso is drawn in white along x = 32
        col = img[:, 32, 32]
        assert np.all(col > 0.9)
        assert img[:, 32, 5].max() == 0.0

    def test_unknown_layout_rejected(self):
        with pytest.raises(LayoutError):
            Skeleton(np.zeros((44, 3)), "no-such-layout")

    def test_golden_hash_stable(self):
        rng = np.random.default_rng(1234)
        kps = rng.uniform(0.15, 0.85, size=(44, 3))
        kps[:, 2] = 1.0
        img = render_skeleton(Skeleton(kps, "stick-44"), (96, 64))
        quantized = np.round(img * 255.0).astype(np.uint8)
        digest = hashlib.sha256(quantized.tobytes()).hexdigest()
        again = render_skeleton(Skeleton(kps, "stick-44"), (96, 64))
        assert hashlib.sha256(
            np.round(again * 255.0).astype(np.uint8).tobytes()
        ).hexdigest() == digest
        # frozen after first render
        assert digest == GOLDEN_STICK44_HASH


GOLDEN_STICK44_HASH = (
    "c1b1e8de6696292ab2919124b22bbfc083be56e7ce957c307affe3eb6a927da2"
)


def disk_mask(size, cy, cx, r):
    ys, xs = np.mgrid[0:size, 0:size]
    return (((ys - cy) ** 2 + (xs - cx) ** 2) <= r * r).astype(np.float32)[None]


def crop_with_hand(size=64, wrist=(0.5, 0.8), mid=(0.5, 0.5)):
    kps = np.zeros((2, 21, 3))
    kps[0, 0] = (*wrist, 1)
    kps[0, 9] = (*mid, 1)   # middle finger base
    return kps


class TestAssembleCanvas:
    def skeleton_with_hand(self, wrist, mid):
        kps = np.zeros((44, 3))
        kps[2 + 0] = (*wrist, 1)
        kps[2 + 9] = (*mid, 1)
        return Skeleton(kps, "stick-44")

    def test_identity_placement_exact(self):
        size = 64
        mask = disk_mask(size, 40, 32, 9)
        img = np.random.default_rng(2).random((3, size, size)).astype(np.float32)
        crop_kps = crop_with_hand()
        sk = self.skeleton_with_hand((0.5, 0.8), (0.5, 0.5))
        canvas = assemble_canvas(img, mask, crop_kps, sk, size)
        assert np.array_equal(canvas.mask, mask)
        assert canvas.transform == (1.0, 0.0, 0.0)
        assert np.allclose(canvas.image[:, mask[0] > 0], img[:, mask[0] > 0])
        assert np.all(canvas.image[:, mask[0] == 0] == 0.5)

    def test_half_scale_shrinks_area(self):
        size = 64
        r = 10
        mask = disk_mask(size, 40, 32, r)
        img = np.ones((3, size, size), dtype=np.float32)
        crop_kps = crop_with_hand(wrist=(0.5, 0.8), mid=(0.5, 0.5))
        sk = self.skeleton_with_hand(wrist=(0.5, 0.65), mid=(0.5, 0.5))
        canvas = assemble_canvas(img, mask, crop_kps, sk, size)
        assert canvas.transform[0] == pytest.approx(0.5, rel=1e-6)
        # rasterized area oracle for the half-size disk, +/- 1 px boundary
        expected = disk_mask(size, 32, 32, r / 2).sum()
        perimeter = 2 * math.pi * (r / 2)
        assert abs(canvas.mask.sum() - expected) <= perimeter + 2

    def test_two_hands_in_one_crop_union(self):
        size = 64
        left = disk_mask(size, 30, 16, 7)
        right = disk_mask(size, 30, 48, 7)
        mask = np.maximum(left, right)
        img = np.ones((3, size, size), dtype=np.float32)
        crop_kps = crop_with_hand()
        crop_kps[1, 0] = (0.75, 0.8, 1)
        crop_kps[1, 9] = (0.75, 0.5, 1)
        sk_kps = np.zeros((44, 3))
        sk_kps[2 + 0] = (0.5, 0.8, 1)
        sk_kps[2 + 9] = (0.5, 0.5, 1)
        sk = Skeleton(sk_kps, "stick-44")
        canvas = assemble_canvas(img, mask, crop_kps, sk, size)
        # rigid identity placement: union mask survives
        assert canvas.mask.sum() == mask.sum()

    def test_missing_wrist_is_hard_error(self):
        mask = disk_mask(64, 40, 32, 9)
        img = np.ones((3, 64, 64), dtype=np.float32)
        crop_kps = crop_with_hand()
        sk = make_skeleton()  # nothing visible
        with pytest.raises(HandPlacementError):
            assemble_canvas(img, mask, crop_kps, sk, 64)

    @given(scale=st.floats(0.9, 1.25), dx=st.floats(-0.1, 0.1),
           dy=st.floats(-0.1, 0.1))
    @settings(max_examples=25, deadline=None)
    def test_inverse_transform_recovers_mask(self, scale, dx, dy):
        size = 96
        mask = disk_mask(size, 45, 48, 22)
        img = np.ones((3, size, size), dtype=np.float32)
        crop_kps = crop_with_hand(wrist=(0.5, 0.7), mid=(0.5, 0.45))
        wrist = (0.5 + dx, 0.7 * scale + dy)
        mid = (0.5 + dx, (0.7 - 0.25) * scale + dy)
        sk = self.skeleton_with_hand(wrist, mid)
        canvas = assemble_canvas(img, mask, crop_kps, sk, (128, 128))
        recovered = invert_canvas_mask(canvas, (size, size))
        inter = np.logical_and(recovered > 0, mask > 0).sum()
        union = np.logical_or(recovered > 0, mask > 0).sum()
        assert inter / union >= 0.98


class TestPostprocessMask:
    def test_single_pixel_becomes_5x5(self):
        m = np.zeros((16, 16), dtype=np.float32)
        m[8, 8] = 1
        out = postprocess_mask(m)
        oracle = dilate_bruteforce(m > 0, np.ones((5, 5), bool))
        assert np.array_equal(out > 0, oracle)
        assert out.sum() == 25

    def test_all_ones_unchanged(self):
        m = np.ones((1, 8, 8), dtype=np.float32)
        assert np.array_equal(postprocess_mask(m), m)

    def test_empty_stays_empty(self):
        m = np.zeros((1, 8, 8), dtype=np.float32)
        assert postprocess_mask(m).sum() == 0

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((12, 12)) < 0.15).astype(np.float32)
        out = postprocess_mask(m)
        oracle = dilate_bruteforce(m > 0, np.ones((5, 5), bool))
        assert np.array_equal(out > 0, oracle)


class TestSkeletonJson:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        kps = rng.random((44, 3))
        sk = Skeleton(kps, "stick-44")
        back = Skeleton.from_json(sk.to_json())
        assert back.layout == "stick-44"
        assert np.allclose(back.keypoints, kps)
