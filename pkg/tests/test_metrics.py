import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivnac.errors import ContractError, DimensionError
from ivnac.metrics import MetricsReport, aggregate, brain_mask, mae_pct, psnr, rmse_pct, ssim


def image(seed=0, n=32):
    rng = np.random.default_rng(seed)
    r, c = np.indices((n, n))
    return np.sin(r / 4.0) + np.cos(c / 5.0) + 0.1 * rng.standard_normal((n, n)) + 3.0


class TestPsnr:
    def test_cap_at_identity(self):
        x = image()
        assert psnr(x, x) == 99.0

    def test_uniform_error(self):
        ref = np.zeros((8, 8))
        ref[0, 0] = 1.0
        assert psnr(ref, ref + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_halving_error_adds_6db(self):
        ref = image()
        e = np.random.default_rng(1).standard_normal(ref.shape) * 0.1
        assert psnr(ref, ref + e / 2) - psnr(ref, ref + e) == pytest.approx(20 * math.log10(2), abs=1e-6)

    def test_sign_symmetric(self):
        ref = image()
        e = np.random.default_rng(2).standard_normal(ref.shape) * 0.1
        assert psnr(ref, ref + e) == psnr(ref, ref - e)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.ones((2, 2)), np.ones((2, 3)))

    def test_zero_reference(self):
        with pytest.raises(ContractError):
            psnr(np.zeros((4, 4)), np.ones((4, 4)))


class TestSsim:
    def test_identity(self):
        x = image()
        assert ssim(x, x) == 1.0

    def test_noise_drops_below_half(self):
        x = image()
        noisy = x + np.random.default_rng(3).standard_normal(x.shape) * 2.0
        assert ssim(x, noisy) < 0.5

    @pytest.mark.parametrize("a,b", [(1.2, 0.0), (1.0, 0.3), (0.8, -0.2)])
    def test_affine_penalized(self, a, b):
        x = image()
        assert ssim(x, a * x + b) < 1.0

    def test_single_window_closed_form(self):
        """An 11x11 image has one valid window; compare with direct evaluation of the formula."""
        rng = np.random.default_rng(4)
        x, y = rng.uniform(0, 1, (11, 11)), rng.uniform(0, 1, (11, 11))
        g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
        w = np.outer(g, g) / np.outer(g, g).sum()
        mx, my = (w * x).sum(), (w * y).sum()
        sx, sy = (w * x * x).sum() - mx**2, (w * y * y).sum() - my**2
        sxy = (w * x * y).sum() - mx * my
        L = x.max() - x.min()
        c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
        expect = (2 * mx * my + c1) * (2 * sxy + c2) / ((mx**2 + my**2 + c1) * (sx + sy + c2))
        assert ssim(x, y) == pytest.approx(expect, abs=1e-9)

    def test_symmetric_with_shared_range(self):
        x = image(0)
        y = image(1)
        assert ssim(x, y, data_range=2.0) == pytest.approx(ssim(y, x, data_range=2.0), abs=1e-12)

    def test_range(self):
        x = image(0)
        assert -1.0 <= ssim(x, -x + 7) <= 1.0

    def test_degenerate_range(self):
        with pytest.raises(ContractError):
            ssim(np.ones((16, 16)), np.ones((16, 16)))


class TestRmse:
    def test_hand_case(self):
        ref = np.array([0.0, 10.0])
        pred = ref + np.array([3.0, 4.0])
        assert rmse_pct(ref, pred) == pytest.approx(100 * math.sqrt(12.5) / 10, abs=1e-6)
        assert rmse_pct(ref, pred) == pytest.approx(35.355339, abs=1e-6)

    def test_scale_invariant(self):
        x, y = image(0), image(1)
        assert rmse_pct(10 * x, 10 * y) == pytest.approx(rmse_pct(x, y), rel=1e-12)

    def test_zero_at_identity(self):
        x = image()
        assert rmse_pct(x, x) == 0.0

    def test_mean_normalization(self):
        ref = np.array([1.0, 3.0])
        assert rmse_pct(ref, ref + 1.0, norm="mean") == pytest.approx(50.0)

    def test_degenerate(self):
        with pytest.raises(ContractError):
            rmse_pct(np.ones(4), np.zeros(4))


class TestMae:
    def test_single_pixel(self):
        assert mae_pct(np.array([2.0]), np.array([1.0]), np.array([True])) == pytest.approx(50.0)

    def test_two_pixels(self):
        assert mae_pct(np.array([2.0, 4.0]), np.array([1.0, 4.0]), np.array([True, True])) == pytest.approx(25.0)

    def test_mask_respected(self):
        ref, pred = np.array([2.0, 4.0]), np.array([1.0, 0.0])
        assert mae_pct(ref, pred, np.array([True, False])) == pytest.approx(50.0)

    def test_floor_excludes_and_counts(self):
        ref = np.array([1.0, 1e-9])
        value, excluded = mae_pct(ref, np.array([1.0, 5.0]), return_excluded=True)
        assert value == 0.0 and excluded == 1

    def test_empty_mask(self):
        with pytest.raises(ContractError):
            mae_pct(np.ones(3), np.ones(3), np.zeros(3, bool))

    def test_zero_iff_identical_on_support(self):
        x = image()
        assert mae_pct(x, x) == 0.0
        y = x.copy()
        y[3, 3] += 0.5
        assert mae_pct(x, y) > 0.0


class TestBrainMask:
    def test_largest_component(self):
        img = np.zeros((20, 20))
        img[2:10, 2:10] = 1.0
        img[15:17, 15:17] = 1.0
        m = brain_mask(img)
        assert m.sum() == 64 and not m[16, 16]

    def test_threshold_fraction(self):
        img = np.zeros((10, 10))
        img[2:8, 2:8] = 0.04
        img[4:6, 4:6] = 1.0
        assert brain_mask(img).sum() == 4
        assert brain_mask(img, fraction=0.03).sum() == 36


class TestAggregate:
    def test_single(self):
        assert aggregate([3.5]) == (3.5, 0.0)

    def test_population_std(self):
        assert aggregate([20.0, 24.0]) == (22.0, 2.0)

    @settings(max_examples=30)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.randoms())
    def test_order_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert aggregate(values) == aggregate(shuffled)

    def test_empty(self):
        with pytest.raises(ContractError):
            aggregate([])

    def test_report(self):
        r = MetricsReport()
        r.add("a", 20.0, 0.9, 1.0, 2.0)
        r.add("b", 24.0, 0.8, 3.0, 4.0)
        assert r.mean("psnr_db") == 22.0 and r.std("psnr_db") == 2.0
        assert r.key_values()["mae_pct_mean"] == 3.0
        assert r.lines()[-1].startswith("MEAN±STD 22±2")
