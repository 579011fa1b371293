import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabe.nn import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    MLP,
    ConfigError,
    DiagGaussian,
    NumericError,
    adam_init,
    adam_step,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_sample,
    init_mlp,
    mlp_forward,
    mlp_gradients,
)


def naive_forward(net, x):
    """Loop-based matrix-multiply-plus-rectifier reference."""
    h = list(x)
    n_layers = len(net.weights)
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for r in range(w.shape[0]):
            acc = b[r]
            for c in range(w.shape[1]):
                acc += w[r, c] * h[c]
            out.append(acc if li == n_layers - 1 else max(acc, 0.0))
        h = out
    return np.array(h)


def central_diff(f, arrays, step=1e-5):
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + step
            fp = f()
            a[idx] = old - step
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    for ga, gn in zip(analytic, numeric):
        err = np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
        assert err.max() < rtol, err.max()


class TestForward:
    def test_zero_weights_gives_bias(self):
        b = np.array([0.5, -2.0])
        net = MLP((np.zeros((3, 4)), np.zeros((2, 3))), (np.zeros(3), b))
        np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, -3.0, 2.0, 7.0])), b)

    def test_identity_layer(self):
        net = MLP((np.eye(3),), (np.zeros(3),))
        x = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(mlp_forward(net, x), x)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        net = init_mlp([5, 7, 6, 3], rng)
        net = net.with_arrays([a + 0.1 * rng.standard_normal(a.shape) for a in net.arrays])
        for _ in range(5):
            x = rng.standard_normal(5)
            fast = mlp_forward(net, x)
            slow = naive_forward(net, x)
            np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-14)

    def test_gaussian_head_clamps(self):
        w = np.zeros((4, 2))
        net = MLP((w,), (np.array([0.0, 1.0, -50.0, 50.0]),), "gaussian")
        out = mlp_forward(net, np.zeros(2))
        assert isinstance(out, DiagGaussian)
        np.testing.assert_array_equal(out.log_std, [LOG_STD_MIN, LOG_STD_MAX])

    def test_dimension_mismatch(self):
        net = init_mlp([3, 4, 1], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            mlp_forward(net, np.zeros(2))

    def test_layer_chain_validated(self):
        with pytest.raises(ConfigError):
            MLP((np.zeros((3, 2)), np.zeros((1, 4))), (np.zeros(3), np.zeros(1)))


class TestGradients:
    def test_zero_loss_zero_grad(self):
        net = init_mlp([3, 5, 2], np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((4, 3))
        loss, grads = mlp_gradients(net, x, lambda y: (np.zeros(len(y)), np.zeros_like(y)))
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads)

    def test_single_linear_unit_hand_derivative(self):
        w = np.array([[0.4, -1.0, 2.0]])
        net = MLP((w,), (np.zeros(1),))
        x = np.array([[1.5, 0.5, -0.25]])
        y = 0.7

        def loss(out):
            r = out[:, 0] - y
            return 0.5 * r * r, r[:, None]

        _, grads = mlp_gradients(net, x, loss)
        resid = float((w @ x[0])[0]) - y
        np.testing.assert_allclose(grads[0], resid * x, rtol=1e-14)
        np.testing.assert_allclose(grads[1], [resid], rtol=1e-14)

    @pytest.mark.parametrize("head", ["linear", "gaussian"])
    def test_finite_differences(self, head):
        rng = np.random.default_rng(3)
        net = init_mlp([4, 6, 5, 4], rng, head=head)
        arrays = [a + 0.2 * rng.standard_normal(a.shape) for a in net.arrays]
        x = rng.standard_normal((7, 4))
        target = rng.standard_normal((7, 2))

        if head == "linear":
            target = rng.standard_normal((7, 4))

            def loss(out):
                r = out - target
                return 0.5 * np.sum(r * r, axis=-1) + np.sum(np.sin(out), axis=-1), r + np.cos(out)
        else:
            def loss(d):
                from mabe.nn import gaussian_log_prob_grads
                gm, gl = gaussian_log_prob_grads(d, target)
                return -gaussian_log_prob(d, target), (-gm, -gl)

        _, analytic = mlp_gradients(net.with_arrays(arrays), x, loss)

        def f():
            val, _ = mlp_gradients(net.with_arrays(arrays), x, loss)
            return val

        numeric = central_diff(f, arrays)
        assert_grads_close(analytic, numeric)

    def test_non_finite_loss_reports_index(self):
        net = init_mlp([2, 3, 1], np.random.default_rng(0))
        x = np.zeros((5, 2))

        def loss(out):
            losses = np.zeros(5)
            losses[3] = np.nan
            return losses, np.zeros_like(out)

        with pytest.raises(NumericError, match="index 3"):
            mlp_gradients(net, x, loss)


class TestAdam:
    def test_zero_grad_keeps_params(self):
        p = [np.array([1.0, -2.0]), np.array([[3.0]])]
        st0 = adam_init(p)
        new, st1 = adam_step(st0, p, [np.zeros(2), np.zeros((1, 1))])
        np.testing.assert_array_equal(new[0], p[0])
        np.testing.assert_array_equal(new[1], p[1])
        assert st1.t == 1

    def test_first_step_moves_by_lr_sign(self):
        p = [np.array([0.0, 0.0, 0.0])]
        g = [np.array([3.0, -0.2, 1e-3])]
        st0 = adam_init(p, lr=0.01)
        new, _ = adam_step(st0, p, g)
        expected = -0.01 * g[0] / (np.abs(g[0]) + 1e-8)
        np.testing.assert_allclose(new[0], expected, rtol=1e-12)
        np.testing.assert_allclose(new[0], -0.01 * np.sign(g[0]), rtol=1e-4)

    def test_two_step_trace(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p0 = 1.0
        g = 0.5
        # hand-rolled trace
        m = v = 0.0
        p = p0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params = [np.array([p0])]
        state = adam_init(params, lr=lr)
        for _ in range(2):
            params, state = adam_step(state, params, [np.array([g])])
        assert params[0][0] == pytest.approx(p, rel=1e-14)
        assert state.t == 2

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        p = [rng.standard_normal((3, 2))]
        g = [rng.standard_normal((3, 2))]
        s = adam_init(p)
        a, sa = adam_step(s, p, g)
        b, sb = adam_step(s, p, g)
        assert a[0].tobytes() == b[0].tobytes()
        assert sa.v[0].tobytes() == sb.v[0].tobytes()
        assert np.all(sa.v[0] >= 0)


class TestGaussian:
    def test_log_prob_standard_normal(self):
        d = DiagGaussian(np.zeros(1), np.zeros(1))
        assert gaussian_log_prob(d, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert gaussian_log_prob(d, np.zeros(1)) == pytest.approx(-0.91894, abs=1e-5)

    def test_log_prob_at_mean(self):
        log_std = np.array([0.3, -1.1, 0.0])
        mean = np.array([1.0, 2.0, -3.0])
        d = DiagGaussian(mean, log_std)
        expected = -log_std.sum() - 1.5 * math.log(2 * math.pi)
        assert gaussian_log_prob(d, mean) == pytest.approx(expected, rel=1e-14)

    def test_log_prob_independent_formula(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            mean = rng.standard_normal(4)
            std = np.exp(rng.uniform(-1, 1, 4))
            x = rng.standard_normal(4)
            d = DiagGaussian(mean, np.log(std))
            # product of univariate densities
            dens = np.prod(np.exp(-((x - mean) ** 2) / (2 * std ** 2)) / (std * math.sqrt(2 * math.pi)))
            assert gaussian_log_prob(d, x) == pytest.approx(math.log(dens), rel=1e-12)

    def test_log_prob_dim_mismatch(self):
        with pytest.raises(ConfigError):
            gaussian_log_prob(DiagGaussian(np.zeros(2), np.zeros(2)), np.zeros(3))

    def test_kl_self_is_zero(self):
        d = DiagGaussian(np.array([0.2, -4.0]), np.array([0.5, -2.0]))
        assert gaussian_kl(d, d) == 0.0

    def test_kl_unit_shift(self):
        p = DiagGaussian(np.array([1.0]), np.zeros(1))
        q = DiagGaussian(np.array([0.0]), np.zeros(1))
        assert gaussian_kl(p, q) == pytest.approx(0.5, rel=1e-15)

    def test_kl_monte_carlo(self):
        rng = np.random.default_rng(11)
        p = DiagGaussian(rng.standard_normal(3), rng.uniform(-0.5, 0.5, 3))
        q = DiagGaussian(rng.standard_normal(3), rng.uniform(-0.5, 0.5, 3))
        x = gaussian_sample(p, rng.standard_normal((100_000, 3)))
        diff = gaussian_log_prob(p, x) - gaussian_log_prob(q, x)
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        assert abs(diff.mean() - gaussian_kl(p, q)) < 3 * se

    def test_kl_dim_mismatch(self):
        with pytest.raises(ConfigError):
            gaussian_kl(DiagGaussian(np.zeros(2), np.zeros(2)), DiagGaussian(np.zeros(1), np.zeros(1)))

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
        st.lists(st.floats(LOG_STD_MIN, LOG_STD_MAX), min_size=4, max_size=4),
    )
    def test_kl_nonnegative(self, means, log_stds):
        p = DiagGaussian(np.array(means[:2]), np.array(log_stds[:2]))
        q = DiagGaussian(np.array(means[2:]), np.array(log_stds[2:]))
        kl = gaussian_kl(p, q)
        assert kl >= -1e-12 * max(1.0, abs(kl))
        if np.array_equal(p.mean, q.mean) and np.array_equal(p.log_std, q.log_std):
            assert kl == 0.0

    def test_sample_zero_noise(self):
        d = DiagGaussian(np.array([1.0, -2.0]), np.array([0.3, 0.1]))
        np.testing.assert_array_equal(gaussian_sample(d, np.zeros(2)), d.mean)

    def test_sample_at_clamp_floor(self):
        d = DiagGaussian(np.array([0.5]), np.array([LOG_STD_MIN]))
        out = gaussian_sample(d, np.array([1.0]))
        assert abs(out[0] - 0.5) <= math.exp(LOG_STD_MIN) * (1 + 1e-12)

    def test_sample_moments(self):
        rng = np.random.default_rng(13)
        d = DiagGaussian(np.array([1.5, -0.5]), np.log(np.array([0.7, 2.0])))
        x = gaussian_sample(d, rng.standard_normal((100_000, 2)))
        n = len(x)
        se_mean = d.std / math.sqrt(n)
        se_std = d.std / math.sqrt(2 * n)
        assert np.all(np.abs(x.mean(0) - d.mean) < 3 * se_mean)
        assert np.all(np.abs(x.std(0, ddof=1) - d.std) < 3 * se_std)

    def test_density_normalizes(self):
        # importance identity: E_q[p(x)/q(x)] = 1
        rng = np.random.default_rng(17)
        p = DiagGaussian(np.array([0.3, -0.2]), np.log(np.array([0.8, 1.1])))
        q = DiagGaussian(np.zeros(2), np.log(np.array([1.5, 1.5])))
        x = gaussian_sample(q, rng.standard_normal((50_000, 2)))
        ratio = np.exp(gaussian_log_prob(p, x) - gaussian_log_prob(q, x))
        assert abs(ratio.mean() - 1.0) < 4 * ratio.std() / math.sqrt(len(ratio))
