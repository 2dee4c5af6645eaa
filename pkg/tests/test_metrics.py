import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handpaint.metrics import (
    DEFAULT_THRESHOLDS,
    Detection,
    KeypointMatch,
    MetricsReport,
    RandomProjectionExtractor,
    StyleClassifierExtractor,
    apply_foreground,
    boundary_artifact_score,
    dap,
    fid,
    kid,
    mpjpe,
    mpjpe_with_flags,
    oks,
    train_feature_extractor,
)

from oracles import ap_exhaustive, mmd2_bruteforce, oks_reference


def kps(coords, vis=1.0):
    arr = np.asarray(coords, dtype=np.float64)
    out = np.full((len(arr), 3), vis)
    out[:, :2] = arr
    return out


class TestOks:
    def test_exact_prediction_is_one(self):
        gt = kps([[0.2, 0.3], [0.7, 0.8]])
        m = KeypointMatch(gt, gt.copy(), scale=0.5)
        assert oks(m) == pytest.approx(1.0)

    def test_single_keypoint_e_minus_one(self):
        s, k = 0.4, 0.1
        d = math.sqrt(2.0) * s * k     # d^2 = 2 s^2 k^2
        gt = kps([[0.5, 0.5]])
        pred = kps([[0.5 + d, 0.5]])
        m = KeypointMatch(gt, pred, scale=s)
        assert oks(m) == pytest.approx(math.exp(-1.0), rel=1e-9)

    def test_far_predictions_go_to_zero(self):
        gt = kps([[0.5, 0.5]])
        pred = kps([[1e6, 1e6]])
        assert oks(KeypointMatch(gt, pred, scale=0.3)) <= 1e-12

    def test_invisible_keypoints_excluded(self):
        gt = np.array([[0.5, 0.5, 1.0], [0.9, 0.9, 0.0]])
        pred = kps([[0.5, 0.5], [0.0, 0.0]])
        assert oks(KeypointMatch(gt, pred, scale=0.3)) == pytest.approx(1.0)

    def test_no_visible_keypoints_error(self):
        gt = np.zeros((2, 3))
        with pytest.raises(ValueError):
            oks(KeypointMatch(gt, gt, scale=0.3))

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = rng.integers(1, 10)
            gt = np.column_stack([rng.random((n, 2)),
                                  rng.integers(0, 2, n)])
            if gt[:, 2].sum() == 0:
                gt[0, 2] = 1
            pred = np.column_stack([rng.random((n, 2)), np.ones(n)])
            k = rng.uniform(0.05, 0.3, n)
            s = rng.uniform(0.1, 0.9)
            m = KeypointMatch(gt, pred, scale=s, k=k)
            assert oks(m) == pytest.approx(
                oks_reference(gt, pred, gt[:, 2], s, k), rel=1e-12)

    @given(factor=st.floats(0.2, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_invariant_to_joint_rescaling(self, factor):
        rng = np.random.default_rng(4)
        gt = kps(rng.random((6, 2)))
        pred = kps(rng.random((6, 2)))
        base = oks(KeypointMatch(gt, pred, scale=0.4))
        gt2 = gt.copy()
        pred2 = pred.copy()
        gt2[:, :2] *= factor
        pred2[:, :2] *= factor
        scaled = oks(KeypointMatch(gt2, pred2, scale=0.4 * factor))
        assert scaled == pytest.approx(base, rel=1e-9)


def _fuzz_case(rng, n_kp=5, max_preds=5):
    gt = {"keypoints": kps(rng.random((n_kp, 2))),
          "scale": rng.uniform(0.2, 0.8)}
    preds = []
    for _ in range(rng.integers(0, max_preds + 1)):
        noise = rng.uniform(0, 0.2)
        pk = gt["keypoints"].copy()
        pk[:, :2] += rng.normal(0, noise, (n_kp, 2))
        preds.append(Detection(pk, score=float(rng.random())))
    return gt, preds


class TestDap:
    def test_exact_predictions_score_one(self):
        rng = np.random.default_rng(1)
        gt_set, pred_set = [], []
        for _ in range(10):
            g = {"keypoints": kps(rng.random((5, 2))), "scale": 0.5}
            gt_set.append(g)
            pred_set.append([Detection(g["keypoints"].copy())])
        assert dap(gt_set, pred_set) == pytest.approx(1.0)

    def test_everything_beyond_loosest_threshold_scores_zero(self):
        rng = np.random.default_rng(2)
        gt_set, pred_set = [], []
        for _ in range(10):
            g = {"keypoints": kps(rng.random((5, 2))), "scale": 0.05}
            gt_set.append(g)
            pk = g["keypoints"].copy()
            pk[:, :2] += 10.0
            pred_set.append([Detection(pk)])
        assert dap(gt_set, pred_set) == 0.0

    def test_agrees_with_exhaustive_matcher(self):
        rng = np.random.default_rng(3)
        gt_set, pred_set = [], []
        for _ in range(50):
            g, p = _fuzz_case(rng)
            gt_set.append(g)
            pred_set.append(p)
        got = dap(gt_set, pred_set)
        images = [(g, [(d.keypoints, d.score) for d in p])
                  for g, p in zip(gt_set, pred_set)]

        def oks_fn(g, pk):
            return oks(KeypointMatch(g["keypoints"], pk, g["scale"]))

        want = ap_exhaustive(images, DEFAULT_THRESHOLDS, oks_fn)
        assert got == pytest.approx(want, abs=1e-12)

    def test_monotone_under_growing_noise(self):
        rng = np.random.default_rng(5)
        gts = [{"keypoints": kps(rng.random((6, 2))), "scale": 0.3}
               for _ in range(40)]
        values = []
        for noise in (0.0, 0.01, 0.03, 0.1, 0.5):
            preds = []
            r2 = np.random.default_rng(9)
            for g in gts:
                pk = g["keypoints"].copy()
                pk[:, :2] += r2.normal(0, noise, (6, 2))
                preds.append([Detection(pk)])
            values.append(dap(gts, preds))
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_hands_subset_restricts_joints(self):
        rng = np.random.default_rng(6)
        g = {"keypoints": kps(rng.random((10, 2))), "scale": 0.4}
        pk = g["keypoints"].copy()
        pk[:4, :2] += 5.0   # destroy joints outside the subset
        preds = [[Detection(pk)]]
        full = dap([g], preds)
        hands_only = dap([g], preds, subset=tuple(range(4, 10)))
        assert hands_only == pytest.approx(1.0)
        # full OKS is 6/10 = 0.6: only thresholds <= 0.6 match
        assert full == pytest.approx(3 / 10)

    def test_layout_mismatch_rejected(self):
        g = {"keypoints": kps([[0.5, 0.5]]), "scale": 0.5}
        with pytest.raises(ValueError, match="layout"):
            dap([g], [[Detection(kps([[0.1, 0.1], [0.2, 0.2]]))]])


class TestMpjpe:
    def test_exact_is_zero(self):
        gt = kps([[0.1, 0.2], [0.3, 0.4]])
        assert mpjpe(gt, gt.copy()) == 0.0

    def test_three_four_five(self):
        gt = kps([[0.5, 0.5], [0.2, 0.2]])
        pred = gt.copy()
        pred[:, 0] += 0.03
        pred[:, 1] += 0.04
        assert mpjpe(gt, pred) == pytest.approx(0.05, rel=1e-12)

    def test_hands_subset_ignores_body(self):
        gt = kps(np.random.default_rng(1).random((44, 2)))
        pred = gt.copy()
        pred[:2, :2] += 10.0
        assert mpjpe(gt, pred, subset=tuple(range(2, 44))) == 0.0

    def test_undetected_joint_flagged_at_sqrt2(self):
        gt = kps([[0.5, 0.5], [0.2, 0.2]])
        pred = gt.copy()
        pred[1, 2] = 0.0   # detector missed this joint
        value, flagged = mpjpe_with_flags(gt, pred)
        assert flagged == 1
        assert value == pytest.approx((0.0 + math.sqrt(2)) / 2, rel=1e-12)

    def test_empty_subset_rejected(self):
        gt = np.zeros((3, 3))
        with pytest.raises(ValueError):
            mpjpe(gt, gt, subset=(0, 1))


class TestFid:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((500, 8))
        assert fid(f, f.copy()) <= 1e-6

    def test_closed_form_one_dimensional(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((10_000, 1))
        b = rng.standard_normal((10_000, 1)) + 1.0
        # population value: (mu diff)^2 + (s1 - s2)^2 = 1
        assert fid(a, b) == pytest.approx(1.0, rel=0.02)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((300, 5))
        b = rng.standard_normal((300, 5)) * 1.4 + 0.3
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.standard_normal((50, 4))
            b = rng.standard_normal((50, 4))
            assert fid(a, b) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fid(np.zeros((10, 3)), np.zeros((10, 4)))


class TestKid:
    def test_identical_sets_near_zero(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((400, 6))
        mean, _std = kid(f, f.copy(), block_size=200)
        assert abs(mean) < 0.05

    def test_matches_bruteforce_mmd(self):
        a = np.zeros((8, 1))
        b = np.ones((8, 1))
        mean, std = kid(a, b, block_size=8, n_blocks=3)

        def kernel(x, y):
            return (float(x @ y) / 1 + 1.0) ** 3

        want = mmd2_bruteforce(a, b, kernel)
        assert mean == pytest.approx(want, rel=1e-9)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((100, 3))
        b = rng.standard_normal((100, 3)) + 0.5
        m1, _ = kid(a, b, block_size=50, seed=7)
        m2, _ = kid(b, a, block_size=50, seed=7)
        assert m1 == pytest.approx(m2, rel=1e-6)

    def test_insufficient_samples(self):
        with pytest.raises(ValueError):
            kid(np.zeros((4, 2)), np.zeros((4, 2)), block_size=8)


class TestBoundaryArtifactScore:
    def mask(self):
        m = np.zeros((1, 32, 32), dtype=np.float32)
        m[0, 10:22, 10:22] = 1
        return m

    def test_identical_images_zero(self):
        img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        assert boundary_artifact_score(img, self.mask(), img.copy()) == 0.0

    def test_uniform_offset(self):
        ref = np.full((3, 32, 32), 0.4, dtype=np.float32)
        img = ref + 0.1
        assert boundary_artifact_score(img, self.mask(), ref) == \
            pytest.approx(0.1, rel=1e-6)

    def test_uniform_noise_expectation(self):
        # |U(-a, a)| has mean a/2; seeded Monte-Carlo draw
        rng = np.random.default_rng(8)
        a = 0.3
        ref = np.full((3, 32, 32), 0.5, dtype=np.float64)
        img = ref + rng.uniform(-a, a, ref.shape)
        got = boundary_artifact_score(img, self.mask(), ref)
        n_band = 3 * ((np.ones((32, 32)) > 0).sum())  # loose upper bound
        assert got == pytest.approx(a / 2, abs=0.02)

    def test_empty_mask_rejected(self):
        img = np.zeros((3, 8, 8))
        with pytest.raises(ValueError):
            boundary_artifact_score(img, np.zeros((1, 8, 8)), img)


class TestExtractors:
    def test_random_projection_deterministic(self):
        rng = np.random.default_rng(0)
        imgs = [rng.random((3, 20, 20)).astype(np.float32) for _ in range(4)]
        e1 = RandomProjectionExtractor(dim=192, seed=5)
        e2 = RandomProjectionExtractor(dim=192, seed=5)
        f1 = e1.extract(imgs)
        f2 = e2.extract(imgs)
        assert f1.shape == (4, 192)
        assert np.array_equal(f1, f2)

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(0)
        imgs = [rng.random((3, 16, 16)).astype(np.float32)]
        f1 = RandomProjectionExtractor(seed=0).extract(imgs)
        f2 = RandomProjectionExtractor(seed=1).extract(imgs)
        assert not np.allclose(f1, f2)

    def test_style_classifier_features_dim(self):
        from handpaint.synthetic import sample_hand
        rng = np.random.default_rng(0)
        samples = [(s.image, s.style) for s in
                   (sample_hand(rng, 32) for _ in range(12))]
        model = train_feature_extractor(samples, steps=20, num_styles=16)
        feats = model.extract([samples[0][0], samples[1][0]])
        assert feats.shape == (2, 192)

    def test_style_classifier_learns_styles(self):
        from handpaint.synthetic import sample_hand
        rng = np.random.default_rng(1)
        # two clearly distinct styles
        samples = [(s.image, s.style) for s in
                   (sample_hand(rng, 32, style=rng.choice([0, 15]))
                    for _ in range(40))]
        model = train_feature_extractor(samples, steps=150, seed=0)
        import torch
        with torch.no_grad():
            x = torch.from_numpy(np.stack([s[0] for s in samples]))
            pred = model(x).argmax(1).numpy()
        labels = np.array([s[1] for s in samples])
        assert (pred == labels).mean() >= 0.9

    def test_apply_foreground(self):
        img = np.ones((3, 4, 4), dtype=np.float32)
        mask = np.zeros((1, 4, 4), dtype=np.float32)
        mask[0, :2] = 1
        out = apply_foreground(img, mask)
        assert out[:, :2].sum() == 3 * 8
        assert out[:, 2:].sum() == 0


class TestReport:
    def test_json_round_trip(self):
        rep = MetricsReport(dap=0.5, dap_hands=0.4, mpjpe=0.1,
                            mpjpe_hands=0.2, fid_fg=1.5, kid_fg_mean=0.02,
                            kid_fg_std=0.01, n_samples=10,
                            config_hash="abc123")
        back = MetricsReport.from_json(rep.to_json())
        assert back == rep
        assert '"config_hash"' in rep.to_json()
