import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from petdenoise import metrics as M
from petdenoise.data import PhantomSpec, Volume, generate_phantom, simulate_acquisition

from oracles import edge_mask_bfs, riesz_direct, rfsim_straight, ssim_direct


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(dims=(8, 48, 48)), seed=5)


def noisy(vol, sigma, seed):
    r = np.random.default_rng(seed)
    return vol + r.normal(0.0, sigma, size=vol.shape)


class TestPSNRandNRMSE:
    def test_hand_psnr(self):
        assert M.psnr(np.array([0.0, 1.0]), np.array([0.0, 0.5])) == pytest.approx(9.0309, abs=1e-3)

    def test_hand_nrmse(self):
        assert M.nrmse(np.array([0.0, 1.0]), np.array([0.0, 0.5])) == pytest.approx(35.355, abs=1e-3)

    def test_identity(self, rng):
        x = rng.random((3, 8, 8))
        assert M.psnr(x, x) == math.inf
        assert M.nrmse(x, x) == 0.0

    def test_zero_range_rejected(self):
        with pytest.raises(ValueError, match="zero intensity range"):
            M.nrmse(np.ones(4), np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            M.psnr(np.zeros(3), np.zeros(4))

    @settings(max_examples=30, deadline=None)
    @given(k=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_scale_invariance(self, k, seed):
        r = np.random.default_rng(seed)
        a, b = r.random(50), r.random(50)
        assert M.psnr(k * a, k * b) == pytest.approx(M.psnr(a, b), rel=1e-9)
        assert M.nrmse(k * a, k * b) == pytest.approx(M.nrmse(a, b), rel=1e-9)

    def test_volume_uses_raw_units(self, rng):
        x = rng.random((2, 4, 4)) + 0.1
        v = Volume(x / 2.0, intensity_scale=2.0)
        assert M.psnr(v, Volume(x)) == math.inf


class TestSSIM:
    def test_identity(self, rng):
        x = rng.random((20, 20))
        assert M.ssim_index(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_anticorrelated(self, rng):
        x = rng.normal(size=(20, 20))
        # a large offset keeps the luminance term near 1 so structure dominates
        assert M.ssim_index(100.0 + x, 100.0 - x, 10.0) < 0

    def test_gradient_vs_box_blur_oracle(self):
        img = np.add.outer(np.arange(16.0), 2.0 * np.arange(16.0)) / 45.0
        blurred = ndimage.uniform_filter(img, 3, mode="nearest")
        span = img.max() - img.min()
        assert M.ssim_index(img, blurred) == pytest.approx(ssim_direct(img, blurred, span), abs=1e-6)

    def test_random_oracle(self, rng):
        a, b = rng.random((18, 15)), rng.random((18, 15))
        assert M.ssim_index(a, b, 1.0) == pytest.approx(ssim_direct(a, b, 1.0), abs=1e-9)

    def test_window_too_big(self):
        with pytest.raises(ValueError):
            M.ssim_index(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_symmetric(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert M.ssim_index(a, b, 1.0) == pytest.approx(M.ssim_index(b, a, 1.0), rel=1e-12)


class TestRiesz:
    def test_constant_image(self):
        for f in M.riesz_features(np.full((12, 12), 3.0)).as_list():
            assert np.abs(f).max() < 1e-6

    def test_direction_selectivity(self):
        x = np.arange(32)
        img = np.tile(np.cos(2 * np.pi * 4 * x / 32), (32, 1))
        feats = M.riesz_features(img)
        assert np.abs(feats.ry).max() < 1e-9
        assert np.abs(feats.rx).max() > 0.5

    def test_matches_dft_oracle(self, rng):
        img = rng.random((16, 12))
        for got, want in zip(M.riesz_features(img).as_list(), riesz_direct(img)):
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_second_order_trace(self, rng):
        img = rng.random((16, 16))
        f = M.riesz_features(img)
        np.testing.assert_allclose(f.rxx + f.ryy, -(img - img.mean()), atol=1e-6)

    def test_minimum_size(self):
        with pytest.raises(ValueError, match="8x8"):
            M.riesz_features(np.zeros((7, 9)))


class TestCanny:
    def test_constant_images(self):
        assert not M.canny_mask(np.ones((16, 16)), np.ones((16, 16))).any()

    def test_step_edge(self):
        img = np.zeros((20, 20))
        img[:, 10:] = 1.0
        mask = M.canny_mask(img, img)
        assert mask[:, 9:11].all()
        assert not mask[:, :4].any()
        # no thinning: the band is several pixels wide
        assert mask.sum(axis=1).min() >= 3

    def test_checkerboard_count_matches_oracle(self):
        board = np.kron((np.indices((6, 6)).sum(axis=0) % 2).astype(float), np.ones((5, 5)))
        assert M.canny_mask(board, board).sum() == edge_mask_bfs(board).sum()

    def test_noisy_phantom_matches_oracle(self, phantom):
        ref = phantom.data[2].astype(np.float64)
        test = noisy(ref, 0.1, 0)
        np.testing.assert_array_equal(M.canny_mask(ref, test), edge_mask_bfs(ref) | edge_mask_bfs(test))


class TestRFSIM:
    def test_identity(self, phantom):
        assert M.rfsim(phantom, phantom) == 1.0

    def test_empty_mask_scores_one(self):
        x = np.ones((2, 16, 16))
        assert M.rfsim(x, x + 0.0) == 1.0

    def test_straight_line_oracle(self, phantom):
        ref = phantom.raw()
        test = noisy(ref, 0.05, 1)
        r, t = M._unit_range(ref, test)
        for z in range(ref.shape[0]):
            assert M.rfsim_slice(r[z], t[z]) == pytest.approx(rfsim_straight(r[z], t[z]), abs=1e-6)

    def test_symmetric_and_bounded(self, phantom):
        ref = phantom.raw()
        test = noisy(ref, 0.1, 2)
        r, t = M._unit_range(ref, test)
        a = M.rfsim_slice(r[1], t[1])
        b = M.rfsim_slice(t[1], r[1])
        assert a == pytest.approx(b, rel=1e-12)
        assert 0.0 <= a <= 1.0


class TestVIF:
    def test_identity(self, rng):
        x = rng.random((2, 48, 48))
        assert M.vif(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_min_size(self):
        assert M.vif_min_size() == 41
        with pytest.raises(ValueError, match="41"):
            M.vif(np.random.default_rng(0).random((1, 40, 40)), np.zeros((1, 40, 40)))

    def test_flat_reference(self):
        vol = np.zeros((2, 48, 48))
        vol[1] = np.random.default_rng(0).random((48, 48))
        assert M.vif_slices(vol, vol)[0] == 1.0

    def test_flat_slice_differs(self):
        ref = np.ones((2, 48, 48))
        ref[1] = np.random.default_rng(0).random((48, 48))
        test = ref.copy()
        test[0, 5, 5] = 0.0
        with pytest.raises(ValueError, match="no information"):
            M.vif(ref, test)

    def test_bounded(self, phantom):
        v = M.vif(phantom, noisy(phantom.raw(), 0.05, 0))
        assert 0.0 <= v <= 1.0


def test_noise_monotonicity(phantom):
    ref = phantom.raw()
    med_psnr, med_vif = [], []
    for sigma in (0.01, 0.05, 0.1):
        ps, vs = [], []
        for seed in range(5):
            t = noisy(ref, sigma, seed)
            ps.append(M.psnr(ref, t))
            vs.append(M.vif(ref, t))
        med_psnr.append(np.median(ps))
        med_vif.append(np.median(vs))
    assert med_psnr[0] > med_psnr[1] > med_psnr[2]
    assert med_vif[0] >= med_vif[1] >= med_vif[2]


class TestReport:
    def test_perfect_scores(self, phantom):
        rep = M.evaluate_volume(phantom, phantom)
        assert (rep.psnr, rep.nrmse, rep.rfsim) == (math.inf, 0.0, 1.0)
        assert rep.vif == pytest.approx(1.0, abs=1e-9)
        assert rep.ssim == pytest.approx(1.0, abs=1e-6)

    def test_pure(self, phantom):
        t = noisy(phantom.raw(), 0.05, 3)
        assert M.evaluate_volume(phantom, t).to_json() == M.evaluate_volume(phantom, t).to_json()

    def test_json_round_trip(self, phantom):
        rep = M.evaluate_volume(phantom, phantom)
        d = json.loads(rep.to_json())
        assert d["psnr"] == "inf"
        assert d["fingerprint"] == M.fingerprint()
        assert M.MetricReport.from_dict(d) == rep

    def test_fingerprint_tracks_constants(self):
        changed = json.loads(json.dumps(M.CONSTANTS))
        changed["rfsim"]["c"] = 0.02
        assert M.fingerprint(changed) != M.fingerprint()

    def test_table(self, phantom):
        rep = M.evaluate_volume(phantom, noisy(phantom.raw(), 0.05, 0))
        text = M.format_table([("Low-dose", rep)])
        assert "PSNR" in text.splitlines()[0]
        assert text.splitlines()[2].startswith("Low-dose")


def test_dose_noise_lowers_scores():
    act = generate_phantom(PhantomSpec(dims=(8, 48, 48)), seed=1)
    normal = simulate_acquisition(act, 1.0, seed=2, sensitivity=5.0)
    low = simulate_acquisition(act, 0.2, seed=3, sensitivity=5.0)
    rep = M.evaluate_volume(normal, low)
    assert rep.rfsim < 1.0 and rep.vif < 1.0 and rep.nrmse > 0.0
