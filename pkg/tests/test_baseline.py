import numpy as np
import pytest

from snlab.baseline import (
    EVAL,
    TRAIN,
    BaselineParams,
    StateError,
    baseline_backward,
    baseline_forward,
    resolve_groups,
)
from snlab.gradcheck import check_baseline, numeric_grad, rel_error
from snlab.stats import ContractError, direct_stats

MODES = ["in", "ln", "bn", "gn"]


def _params(mode, C=4, groups=2):
    return BaselineParams.create(mode, C, groups=groups)


class TestForward:
    @pytest.mark.parametrize("mode", MODES)
    def test_constant_input_gives_zero(self, mode):
        p = _params(mode)
        y, _ = baseline_forward(np.full((2, 4, 3, 3), 2.5), p)
        assert np.all(y == 0.0)

    @pytest.mark.parametrize("mode", MODES)
    def test_zero_gamma(self, mode, rng):
        p = _params(mode)
        p.gamma[:] = 0.0
        p.beta = rng.normal(size=4)
        y, _ = baseline_forward(rng.normal(size=(2, 4, 3, 3)), p)
        assert np.array_equal(y, np.broadcast_to(p.beta[None, :, None, None], y.shape))

    def test_bn_train_normalizes(self, rng):
        p = BaselineParams.create("bn", 3)
        p.gamma = rng.uniform(0.5, 2, 3)
        p.beta = rng.normal(size=3)
        x = rng.normal(2.0, 3.0, size=(2, 3, 4, 5))
        y, _ = baseline_forward(x, p, TRAIN)
        z = (y - p.beta[None, :, None, None]) / p.gamma[None, :, None, None]
        assert np.max(np.abs(z.mean(axis=(0, 2, 3)))) <= 1e-12
        var = direct_stats(x, "bn").var
        np.testing.assert_allclose(z.std(axis=(0, 2, 3)), np.sqrt(var / (var + p.eps)), atol=1e-6)

    @pytest.mark.parametrize("mode", ["in", "ln", "gn"])
    def test_phase_independent(self, mode, rng):
        p = _params(mode)
        x = rng.normal(size=(2, 4, 3, 3))
        assert np.array_equal(baseline_forward(x, p, TRAIN)[0], baseline_forward(x, p, EVAL)[0])

    def test_bn_eval_needs_stats(self, rng):
        with pytest.raises(StateError):
            baseline_forward(rng.normal(size=(2, 3, 2, 2)), BaselineParams.create("bn", 3), EVAL)

    def test_bn_eval_uses_injected(self, rng):
        p = BaselineParams.create("bn", 2)
        p.set_moving_stats([1.0, -1.0], [4.0, 1.0])
        x = rng.normal(size=(3, 2, 2, 2))
        y, _ = baseline_forward(x, p, EVAL)
        ref = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
            np.array([4.0, 1.0])[None, :, None, None] + p.eps)
        np.testing.assert_allclose(y, ref, rtol=0, atol=1e-15)

    def test_moving_update_exact(self):
        p = BaselineParams.create("bn", 1, momentum=0.5)
        p.set_moving_stats([0.0], [0.0])
        p.update_moving(np.array([1.0]), np.array([1.0]))
        assert p.moving_mu[0] == 0.5 and p.moving_var[0] == 0.5

    def test_train_updates_moving(self, rng):
        p = BaselineParams.create("bn", 3, momentum=0.25)
        x = rng.normal(size=(4, 3, 2, 2))
        baseline_forward(x, p, TRAIN)
        s = direct_stats(x, "bn")
        np.testing.assert_array_equal(p.moving_mu, 0.25 * s.mu)
        np.testing.assert_array_equal(p.moving_var, 0.75 + 0.25 * s.var)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ContractError):
            baseline_forward(rng.normal(size=(1, 5, 2, 2)), _params("in"))


class TestGroups:
    def test_default_clamps(self):
        assert resolve_groups(16) == (16, True)
        assert resolve_groups(64) == (32, False)

    def test_clamp_flag_on_params(self):
        p = BaselineParams.create("gn", 8)
        assert p.groups == 8 and p.groups_clamped

    def test_indivisible(self):
        with pytest.raises(ValueError):
            BaselineParams.create("gn", 6, groups=4)


class TestBackward:
    @pytest.mark.parametrize("mode", MODES)
    def test_zero_dy(self, mode, rng):
        p = _params(mode)
        _, cache = baseline_forward(rng.normal(size=(2, 4, 3, 3)), p)
        g = baseline_backward(cache, np.zeros((2, 4, 3, 3)))
        assert not g["dx"].any() and not g["dgamma"].any() and not g["dbeta"].any()

    @pytest.mark.parametrize("mode,phase", [("in", TRAIN), ("ln", TRAIN), ("bn", TRAIN),
                                            ("bn", EVAL), ("gn", TRAIN)])
    def test_finite_differences(self, mode, phase, rng):
        shape = (2, 4, 4, 5) if mode == "gn" else (2, 3, 4, 5)
        errs = check_baseline(mode, rng, shape=shape, phase=phase, groups=2)
        assert max(errs.values()) <= 1e-4, errs

    @pytest.mark.parametrize("mode", MODES)
    def test_finite_differences_sampled(self, mode, rng):
        errs = check_baseline(mode, rng, shape=(4, 4, 5, 5), coords_k=200, groups=2)
        assert max(errs.values()) <= 1e-4, errs

    def test_bn_train_null_direction(self, rng):
        p = BaselineParams.create("bn", 3)
        _, cache = baseline_forward(rng.normal(size=(2, 3, 4, 5)), p)
        g = baseline_backward(cache, rng.normal(size=(2, 3, 4, 5)))
        assert np.max(np.abs(g["dx"].sum(axis=(0, 2, 3)))) <= 1e-10

    def test_shape_mismatch(self, rng):
        _, cache = baseline_forward(rng.normal(size=(2, 4, 2, 2)), _params("ln"))
        with pytest.raises(ContractError):
            baseline_backward(cache, np.zeros((2, 4, 2, 3)))

    def test_corrupted_gradient_is_detected(self, rng):
        errs = check_baseline("ln", rng, corrupt=True)
        assert errs["x"] > 1e-4


def test_numeric_grad_on_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float(np.sum(a ** 2)), a)
    assert rel_error(g, 2 * np.array([1.0, -2.0, 3.0])) <= 1e-9
