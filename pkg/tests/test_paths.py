import numpy as np
import pytest

from conftest import AffineToy, ArrayField
from flowlab import numerics as nx
from flowlab.datasets import Dataset, gen_toy2d
from flowlab.paths import (
    NoiseSchedule, PathError, PathSpec, TrainingBatch, TrainingPair, diffusion_forward, diffusion_loss,
    fm_loss, gaussian_velocity_oracle, model_time, ot_interpolate, sample_training_batch,
    sample_training_pair, target_velocity,
)


def _schedule_with_alpha_bar(value, T=4):
    """Schedule whose alpha_bar at index 1 equals ``value``."""
    b0 = 1 - np.sqrt(value)
    beta = np.array([b0, 1 - value / (1 - b0)] + [0.5] * (T - 2))
    beta = np.maximum.accumulate(beta)
    return NoiseSchedule(T, beta)


class TestSchedule:
    def test_linear_default(self):
        s = NoiseSchedule.linear()
        assert s.num_train_steps == 1000
        assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
        np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=0, atol=0)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert 0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1

    @pytest.mark.parametrize("beta", [[0.0, 0.1], [0.2, 0.1], [0.5, 1.0]])
    def test_rejects_bad_beta(self, beta):
        with pytest.raises(PathError):
            NoiseSchedule(2, np.array(beta))

    def test_roundtrip(self):
        s = NoiseSchedule.linear(50, 1e-3, 0.05)
        t = NoiseSchedule.from_dict(s.to_dict())
        np.testing.assert_array_equal(s.alpha_bar, t.alpha_bar)


class TestPathSpec:
    def test_schedule_iff_diffusion(self):
        with pytest.raises(PathError):
            PathSpec("linear_ot", NoiseSchedule.linear())
        with pytest.raises(PathError):
            PathSpec("vp_diffusion")
        with pytest.raises(PathError):
            PathSpec("cosine")

    def test_roundtrip(self):
        for p in (PathSpec.linear_ot(), PathSpec.vp_diffusion()):
            assert PathSpec.from_dict(p.to_dict()).to_dict() == p.to_dict()


class TestInterpolant:
    def test_endpoints_and_midpoint(self):
        x0, x1 = np.array([0.0, 0.0]), np.array([2.0, 4.0])
        np.testing.assert_array_equal(ot_interpolate(x0, x1, 0.0), x0)
        np.testing.assert_array_equal(ot_interpolate(x0, x1, 1.0), x1)
        np.testing.assert_array_equal(ot_interpolate(x0, x1, 0.5), [1.0, 2.0])

    def test_swap_identity(self):
        rng = np.random.default_rng(0)
        x0, x1 = rng.standard_normal((2, 50))
        for t in rng.uniform(size=10):
            np.testing.assert_allclose(ot_interpolate(x0, x1, t) + ot_interpolate(x1, x0, t), x0 + x1, atol=1e-12)

    def test_affine_in_t(self):
        rng = np.random.default_rng(1)
        x0, x1 = rng.standard_normal((2, 20))
        for a, b in rng.uniform(size=(10, 2)):
            mid = ot_interpolate(x0, x1, (a + b) / 2)
            np.testing.assert_allclose(mid, (ot_interpolate(x0, x1, a) + ot_interpolate(x0, x1, b)) / 2, atol=1e-12)

    def test_time_derivative_is_target(self):
        rng = np.random.default_rng(2)
        x0, x1 = rng.standard_normal((2, 8))
        slope = (ot_interpolate(x0, x1, 0.75) - ot_interpolate(x0, x1, 0.25)) / 0.5
        np.testing.assert_allclose(slope, target_velocity(x0, x1), atol=1e-12)

    def test_per_sample_t(self):
        x0, x1 = np.zeros((2, 3)), np.ones((2, 3))
        np.testing.assert_array_equal(ot_interpolate(x0, x1, np.array([0.25, 0.5])), [[0.25] * 3, [0.5] * 3])

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_t_range(self, t):
        with pytest.raises(PathError):
            ot_interpolate([0.0], [1.0], t)

    def test_shape_mismatch(self):
        with pytest.raises(PathError):
            ot_interpolate([0.0], [1.0, 2.0], 0.5)
        with pytest.raises(PathError):
            target_velocity([0.0], [1.0, 2.0])

    def test_target_velocity(self):
        np.testing.assert_array_equal(target_velocity([1.0], [4.0]), [3.0])
        np.testing.assert_array_equal(target_velocity([2.0, 3.0], [2.0, 3.0]), [0.0, 0.0])
        x0, x1 = np.array([0.3, -1.0]), np.array([2.0, 0.5])
        np.testing.assert_array_equal(x0 + 1.0 * target_velocity(x0, x1), x1)


class TestDiffusionForward:
    def test_quarter(self):
        s = _schedule_with_alpha_bar(0.25)
        assert s.alpha_bar[1] == pytest.approx(0.25, abs=1e-15)
        np.testing.assert_allclose(diffusion_forward([1.0], [0.0], 1, s), [0.5], atol=1e-15)

    def test_limits(self):
        near_one = _schedule_with_alpha_bar(1 - 1e-12)
        np.testing.assert_allclose(diffusion_forward([0.7], [3.0], 1, near_one), [0.7], atol=1e-5)
        near_zero = NoiseSchedule(2, np.array([0.999999, 0.999999]))
        np.testing.assert_allclose(diffusion_forward([0.7], [3.0], 1, near_zero), [3.0], atol=1e-5)

    def test_index_range(self):
        s = NoiseSchedule.linear(10)
        with pytest.raises(PathError):
            diffusion_forward([1.0], [0.0], 10, s)
        with pytest.raises(PathError):
            diffusion_forward([1.0], [0.0], -1, s)

    def test_variance_preserving(self):
        s = NoiseSchedule.linear()
        rng = np.random.default_rng(3)
        x1 = rng.standard_normal((100_000, 2))
        eps = rng.standard_normal((100_000, 2))
        for i in (0, 250, 999):
            xt = diffusion_forward(x1, eps, i, s)
            expected = s.alpha_bar[i] * np.mean((x1 ** 2).sum(1)) + (1 - s.alpha_bar[i]) * 2
            assert np.mean((xt ** 2).sum(1)) == pytest.approx(expected, rel=0.05)

    def test_model_time(self):
        assert model_time(PathSpec.linear_ot(), 0.3) == 0.3
        assert model_time(PathSpec.vp_diffusion(), 500) == 0.5


class TestLosses:
    def _pairs(self):
        return [TrainingPair(np.array([0.0]), np.array([2.0]), 0.4), TrainingPair(np.array([1.0]), np.array([3.0]), 0.9)]

    def test_fm_loss_zero_predictor(self):
        zero = ArrayField(lambda x, t: np.zeros_like(x))
        assert fm_loss(zero, self._pairs()).item() == pytest.approx(4.0)

    def test_fm_loss_oracle_is_zero(self):
        rng = np.random.default_rng(4)
        b = TrainingBatch(rng.standard_normal((16, 3)), rng.standard_normal((16, 3)), rng.uniform(size=16))
        oracle = ArrayField(lambda x, t: b.x1 - b.x0)
        assert fm_loss(oracle, b).item() == 0.0
        off = ArrayField(lambda x, t: b.x1 - b.x0 + 1e-3)
        assert fm_loss(off, b).item() > 0

    def test_diffusion_loss_values(self):
        s = NoiseSchedule.linear(10)
        rng = np.random.default_rng(5)
        eps = rng.choice([-1.0, 1.0], size=(8, 4))
        b = TrainingBatch(eps, rng.standard_normal((8, 4)), rng.integers(0, 10, 8).astype(float))
        assert diffusion_loss(ArrayField(lambda x, t: np.zeros_like(x)), b, s).item() == pytest.approx(1.0)
        assert diffusion_loss(ArrayField(lambda x, t: eps), b, s).item() == 0.0
        with pytest.raises(PathError):
            diffusion_loss(ArrayField(lambda x, t: eps), b, None)

    def test_empty_batch(self):
        with pytest.raises(PathError):
            fm_loss(ArrayField(lambda x, t: x), [])

    @pytest.mark.parametrize("kind", ["fm", "diffusion"])
    def test_loss_gradient_fd(self, kind):
        rng = np.random.default_rng(6)
        s = NoiseSchedule.linear(20)
        t = rng.uniform(size=6) if kind == "fm" else rng.integers(0, 20, 6).astype(float)
        b = TrainingBatch(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)), t)

        def loss(model):
            return fm_loss(model, b) if kind == "fm" else diffusion_loss(model, b, s)

        model = AffineToy()
        nx.backward(loss(model))
        analytic = [p.grad.item() for p in model.parameters()]
        h = 1e-6
        for k, (w0, w1) in enumerate([(h, 0), (0, h)]):
            up = loss(AffineToy(0.3 + w0, -0.2 + w1)).item()
            dn = loss(AffineToy(0.3 - w0, -0.2 - w1)).item()
            assert analytic[k] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-9)


class TestOracle:
    def test_closed_form_values(self):
        x = np.array([1.5, -0.5])
        np.testing.assert_allclose(gaussian_velocity_oracle(x, 0.5), 0.0, atol=0)
        np.testing.assert_allclose(gaussian_velocity_oracle(x, 1.0), x)
        np.testing.assert_allclose(gaussian_velocity_oracle(x, 0.0), -x)

    def test_matches_regression(self):
        """Least-squares slope of (x1 - x0) on x_t from simulated pairs."""
        rng = np.random.default_rng(7)
        n = 100_000
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            x0, x1 = rng.standard_normal((2, n))
            xt = t * x1 + (1 - t) * x0
            slope = np.dot(xt, x1 - x0) / np.dot(xt, xt)
            assert slope == pytest.approx(gaussian_velocity_oracle(1.0, t), abs=0.02)


class TestSampling:
    def setup_method(self):
        self.ds = gen_toy2d("eight_gaussians", 64, seed=0)

    def test_deterministic(self):
        a = sample_training_pair(self.ds, PathSpec.linear_ot(), np.random.default_rng(3))
        b = sample_training_pair(self.ds, PathSpec.linear_ot(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.x0, b.x0)
        np.testing.assert_array_equal(a.x1, b.x1)
        assert a.t == b.t

    def test_moments(self):
        b = sample_training_batch(self.ds, PathSpec.linear_ot(), np.random.default_rng(8), 100_000)
        assert b.t.mean() == pytest.approx(0.5, abs=0.01)
        np.testing.assert_allclose(b.x0.var(0), 1.0, atol=0.02)
        assert b.t.min() >= 0 and b.t.max() <= 1

    def test_diffusion_indices(self):
        p = PathSpec.vp_diffusion()
        b = sample_training_batch(self.ds, p, np.random.default_rng(9), 5000)
        assert b.t.min() >= 0 and b.t.max() <= 999 and np.all(b.t == np.floor(b.t))
        pair = sample_training_pair(self.ds, p, np.random.default_rng(9))
        assert isinstance(pair.t, int)

    def test_denoise_uses_noisy(self):
        ds = Dataset("d", np.full((4, 2), 0.5), noisy=np.full((4, 2), 0.25))
        b = sample_training_batch(ds, PathSpec.linear_ot(), np.random.default_rng(0), 3, denoise=True)
        np.testing.assert_array_equal(b.x0, 0.25)
        with pytest.raises(PathError):
            sample_training_batch(self.ds, PathSpec.linear_ot(), np.random.default_rng(0), 3, denoise=True)

    def test_conditions(self):
        b = sample_training_batch(self.ds, PathSpec.linear_ot(), np.random.default_rng(0), indices=[0, 5],
                                  conditioning="class")
        np.testing.assert_array_equal(b.cond.class_onehot.argmax(1), self.ds.labels[[0, 5]])
        with pytest.raises(PathError):
            sample_training_batch(self.ds, PathSpec.linear_ot(), np.random.default_rng(0), 2, conditioning="mask")

    def test_empty(self):
        with pytest.raises(PathError):
            sample_training_batch(Dataset("e", np.zeros((0, 2))), PathSpec.linear_ot(), np.random.default_rng(0), 1)
