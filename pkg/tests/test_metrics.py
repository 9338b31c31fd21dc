import math

import numpy as np
import pytest

from flowlab.datasets import add_speckle, gen_phantoms
from flowlab.metrics import (
    EvalReport, KernelSpec, MetricError, config_digest, intensity_shift, mask_ssim, mmd2, psnr, sliced_wasserstein,
    snr, ssim,
)

UNIT = KernelSpec((1.0,))


def brute_mmd2(X, Y, bws):
    k = lambda a, b: sum(math.exp(-np.sum((a - b) ** 2) / (2 * s * s)) for s in bws)  # noqa: E731
    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2 * xy


class TestMMD:
    def test_hand_instance(self):
        # X = {0, 1}, Y = {2, 4}, single RBF with s = 1
        e = math.exp
        expected = e(-0.5) + e(-2.0) - (e(-2.0) + e(-8.0) + e(-0.5) + e(-4.5)) / 2
        assert mmd2([[0.0], [1.0]], [[2.0], [4.0]], UNIT) == pytest.approx(expected, abs=1e-12)

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((7, 3)), rng.standard_normal((5, 3)) + 0.5
        bws = (0.5, 1.0, 3.0)
        assert mmd2(X, Y, KernelSpec(bws)) == pytest.approx(brute_mmd2(X, Y, bws), abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        X, Y = rng.standard_normal((30, 2)), rng.standard_normal((40, 2))
        assert mmd2(X, Y, UNIT) == pytest.approx(mmd2(Y, X, UNIT), abs=1e-14)

    def test_same_set_is_order_one_over_n(self):
        # With Y == X the estimate is exactly -(2/n)(K(0) - mean off-diagonal K) <= 0.
        rng = np.random.default_rng(2)
        scaled = []
        for n in (100, 400):
            X = rng.standard_normal((n, 2))
            k = KernelSpec.median_heuristic(X)
            d2 = ((X[:, None] - X[None]) ** 2).sum(-1)
            K = sum(np.exp(-d2 / (2 * s * s)) for s in k.bandwidths)
            off = (K.sum() - np.trace(K)) / (n * (n - 1))
            val = mmd2(X, X, k)
            assert val == pytest.approx(-2 / n * (len(k.bandwidths) - off), abs=1e-12)
            assert val <= 0
            scaled.append(n * val)
        assert scaled[0] == pytest.approx(scaled[1], rel=0.2)

    def test_separated_gaussians(self):
        rng = np.random.default_rng(3)
        assert mmd2(rng.standard_normal((500, 1)), 5 + rng.standard_normal((500, 1)), UNIT) > 0.5

    def test_errors(self):
        with pytest.raises(MetricError):
            mmd2(np.zeros((3, 2)), np.zeros((3, 3)))
        with pytest.raises(MetricError):
            mmd2(np.zeros((1, 2)), np.zeros((3, 2)))
        with pytest.raises(MetricError):
            KernelSpec(())
        with pytest.raises(MetricError):
            KernelSpec((1.0, -1.0))
        with pytest.raises(MetricError):
            KernelSpec((1.0,), kind="laplace")

    def test_median_heuristic(self):
        x = np.array([[0.0], [1.0], [3.0]])  # pairwise distances 1, 2, 3
        k = KernelSpec.median_heuristic(x, scales=(1.0, 2.0))
        assert k.bandwidths == (2.0, 4.0)


class TestSlicedWasserstein:
    def test_identical(self):
        X = np.random.default_rng(0).standard_normal((50, 3))
        assert sliced_wasserstein(X, X) == 0.0

    def test_point_masses(self):
        assert sliced_wasserstein([[0.0]], [[1.0]]) == pytest.approx(1.0, abs=1e-15)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        X, Y = rng.standard_normal((40, 2)), rng.standard_normal((60, 2))
        assert sliced_wasserstein(X, Y, seed=4) == pytest.approx(sliced_wasserstein(Y, X, seed=4), abs=1e-14)

    def test_translation_expectation(self):
        # E|<u, c>| over uniform unit u in 2-D is 2|c|/pi
        X = np.random.default_rng(2).standard_normal((500, 2))
        c = np.array([0.6, -0.8]) * 1.5
        val = sliced_wasserstein(X, X + c, num_projections=4000, seed=0)
        assert val == pytest.approx(1.5 * 2 / math.pi, rel=0.02)

    def test_1d_exact_w1(self):
        # W1 between {0, 1} and {0, 3} is (0 + 2) / 2 = 1
        assert sliced_wasserstein([[0.0], [1.0]], [[0.0], [3.0]]) == pytest.approx(1.0)
        # unequal sizes: {0} vs {0, 2} -> half the mass moves 2
        assert sliced_wasserstein([[0.0]], [[0.0], [2.0]]) == pytest.approx(1.0)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        X, Y = rng.standard_normal((2, 30, 4))
        assert sliced_wasserstein(X, Y, seed=7) == sliced_wasserstein(X, Y, seed=7)

    def test_errors(self):
        with pytest.raises(MetricError):
            sliced_wasserstein(np.zeros((0, 2)), np.zeros((2, 2)))
        with pytest.raises(MetricError):
            sliced_wasserstein(np.zeros((2, 2)), np.zeros((2, 2)), num_projections=0)


class TestSSIM:
    def setup_method(self):
        self.a = gen_phantoms(2, seed=0).samples[0]

    def test_identity(self):
        assert ssim(self.a, self.a) == pytest.approx(1.0, abs=1e-12)
        assert ssim(np.full((8, 8), 0.3), np.full((8, 8), 0.3)) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated_binary(self):
        mask = gen_phantoms(2, seed=0).masks[0]
        assert ssim(mask, 1 - mask) < 0

    def test_symmetric_and_bounded(self):
        b = gen_phantoms(2, seed=0).samples[1]
        assert ssim(self.a, b) == pytest.approx(ssim(b, self.a), abs=1e-14)
        assert -1 <= ssim(self.a, b) < 1

    def test_shift_invariance(self):
        a = 0.1 + 0.8 * self.a
        assert ssim(a, a + 0.01) == pytest.approx(1.0, abs=1e-3)

    def test_matches_skimage(self):
        metrics = pytest.importorskip("skimage.metrics")
        b = add_speckle(self.a, 0.1, seed=1).noisy
        ref = metrics.structural_similarity(self.a, b, win_size=7, data_range=1.0, use_sample_covariance=True,
                                            gaussian_weights=False)
        assert ssim(self.a, b) == pytest.approx(ref, abs=1e-12)

    def test_errors(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((8, 8)), np.zeros((8, 9)))
        with pytest.raises(MetricError):
            ssim(np.zeros((5, 5)), np.zeros((5, 5)))

    def test_mask_ssim(self):
        ds = gen_phantoms(4, seed=2)
        assert mask_ssim(ds.masks * 0.9, ds.masks, 0.5) == pytest.approx(1.0)


class TestPSNR:
    def test_formula(self):
        a = np.zeros((10, 10))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a) == math.inf

    def test_snr(self):
        s = np.ones(4)
        assert snr(s, s + 0.1) == pytest.approx(10 * math.log10(4 / 0.04))
        assert snr(s, s) == math.inf

    def test_speckle_band(self):
        clean = gen_phantoms(50, seed=3).samples
        noisy = add_speckle(clean, 0.1, seed=0).noisy
        vals = [psnr(n, c) for n, c in zip(noisy, clean)]
        assert 10 < min(vals) and max(vals) < 30

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros(3), np.zeros(4))


class TestIntensityShift:
    def test_equal(self):
        imgs = gen_phantoms(10, seed=0).samples
        assert abs(intensity_shift(imgs, imgs)) <= 1e-6

    def test_brighter(self):
        imgs = 0.6 * gen_phantoms(10, seed=0).samples  # mid-range: the shift does not saturate
        assert intensity_shift(imgs, np.clip(imgs + 0.3, 0, 1)) > 0

    def test_full_band(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(0.2, 0.8, (2, 5, 8, 8))
        assert abs(intensity_shift(a, b, band=(0.0, 1.0))) < 1e-6

    def test_errors(self):
        with pytest.raises(MetricError):
            intensity_shift([np.zeros((2, 2))], [np.zeros((2, 2))], band=(0.5, 1.5))
        with pytest.raises(MetricError):
            intensity_shift([], [np.zeros((2, 2))])


class TestReport:
    def _report(self):
        r = EvalReport(provenance={"model": "m"})
        r.add(metric="mmd2", value=1 / 3, n_generated=10, n_reference=12, config_digest="ab", sampler="euler", steps=1)
        r.add(metric="mmd2", value=-1e-17, n_generated=10, n_reference=12, config_digest="cd", sampler="euler", steps=10)
        return r

    def test_json_roundtrip(self):
        r = self._report()
        back = EvalReport.from_json(r.to_json())
        assert back.entries == r.entries and back.provenance == r.provenance

    def test_csv_roundtrip(self):
        r = self._report()
        back = EvalReport.from_csv(r.to_csv())
        assert back.entries == r.entries
        assert r.to_csv().splitlines()[0].startswith("metric,value,n_generated,n_reference")

    def test_value_lookup(self):
        r = self._report()
        assert r.value("mmd2", steps=10) == -1e-17
        with pytest.raises(KeyError):
            r.value("mmd2")

    def test_digest(self):
        assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
        assert len(config_digest({})) == 16
