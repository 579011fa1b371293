import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabe.envs import (
    EnvSpec,
    InputError,
    dynamics_fn,
    env_reset,
    env_step,
    make_blended_collector,
    make_collector,
    reward_fn,
    rollout_episode,
    scripted_policy,
)
from mabe.nn import ConfigError

finite = st.floats(-3, 3, allow_nan=False)


class TestSpec:
    def test_defaults_resolve_per_kind(self):
        assert EnvSpec().direction == (1.0, 0.0)
        assert EnvSpec(kind="pendulum").direction == (1.0,)
        assert EnvSpec(kind="pendulum").goal == (math.pi,)
        assert EnvSpec().obs_dim == 4 and EnvSpec().act_dim == 2
        assert EnvSpec(kind="pendulum").obs_dim == 2

    @pytest.mark.parametrize("kw", [
        {"dt": 0.0}, {"friction": 1.0}, {"friction": -0.1}, {"horizon": 0},
        {"direction": (1.0, 1.0)}, {"kind": "cartpole"}, {"reward": "sparse"},
        {"action_low": 1.0, "action_high": 1.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EnvSpec(**kw)

    def test_dict_round_trip_and_digest(self):
        spec = EnvSpec(friction=0.45, direction=(-1.0, 0.0))
        back = EnvSpec.from_dict(spec.to_dict())
        assert back == spec
        assert back.digest() == spec.digest()
        assert spec.digest() != EnvSpec().digest()


class TestReset:
    def test_zero_width_is_origin(self):
        np.testing.assert_array_equal(env_reset(EnvSpec(init_scale=0.0), 3).obs, np.zeros(4))

    def test_same_seed_same_state(self):
        np.testing.assert_array_equal(env_reset(EnvSpec(), 7).obs, env_reset(EnvSpec(), 7).obs)

    def test_empirical_mean(self):
        spec = EnvSpec(init_scale=0.5)
        obs = np.array([env_reset(spec, s).obs for s in range(10_000)])
        se = 0.5 / math.sqrt(3) / math.sqrt(len(obs))
        assert np.all(np.abs(obs.mean(axis=0)) < 3 * se)


class TestPointMass:
    def test_rest_with_zero_action(self):
        s = env_reset(EnvSpec(init_scale=0.0), 0)
        s2, r, done = env_step(EnvSpec(), s, np.zeros(2))
        np.testing.assert_array_equal(s2.obs, np.zeros(4))
        assert r == 0.0 and not done

    def test_hand_evaluated_step(self):
        spec = EnvSpec(friction=0.0, dt=0.05, init_scale=0.0)
        s2, r, _ = env_step(spec, env_reset(spec, 0), np.array([1.0, 0.0]))
        np.testing.assert_allclose(s2.obs, [0.0025, 0.0, 0.05, 0.0], atol=1e-15)
        assert r == pytest.approx(0.04, abs=1e-15)

    def test_friction_kills_velocity(self):
        eps = 1e-3
        spec = EnvSpec(friction=1 - eps)
        nxt = dynamics_fn(spec, np.array([0.0, 0.0, 2.0, -1.0]), np.zeros(2))
        assert np.linalg.norm(nxt[2:]) == pytest.approx(eps * math.sqrt(5.0), rel=1e-9)

    def test_goal_reward(self):
        spec = EnvSpec(reward="goal", goal=(2.0, 0.0))
        r = reward_fn(spec, np.zeros(4), np.zeros(2), np.array([1.0, 1.0, 0, 0]))
        assert r == pytest.approx(-math.sqrt(2.0))

    def test_actions_clipped(self):
        spec = EnvSpec(friction=0.0, init_scale=0.0)
        s = env_reset(spec, 0)
        a, _, _ = env_step(spec, s, np.array([5.0, -5.0]))
        b, _, _ = env_step(spec, s, np.array([1.0, -1.0]))
        np.testing.assert_array_equal(a.obs, b.obs)

    @pytest.mark.parametrize("bad", [np.array([np.nan, 0.0]), np.array([0.0, np.inf])])
    def test_non_finite_action(self, bad):
        with pytest.raises(InputError):
            env_step(EnvSpec(), env_reset(EnvSpec(), 0), bad)

    def test_wrong_shape(self):
        with pytest.raises(InputError):
            env_step(EnvSpec(), env_reset(EnvSpec(), 0), np.zeros(3))

    def test_done_at_horizon(self):
        spec = EnvSpec(horizon=3)
        s = env_reset(spec, 0)
        dones = []
        for _ in range(3):
            s, _, d = env_step(spec, s, np.zeros(2))
            dones.append(d)
        assert dones == [False, False, True]

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(finite, finite, finite, finite), st.tuples(finite, finite))
    def test_mirror_symmetry(self, s, a):
        fwd = EnvSpec(direction=(1.0, 0.0))
        back = EnvSpec(direction=(-1.0, 0.0))
        obs, act = np.array(s), np.clip(np.array(a), -1, 1)
        flip = np.array([-1.0, 1.0, -1.0, 1.0])
        r1 = reward_fn(fwd, obs, act, dynamics_fn(fwd, obs, act))
        obs_m, act_m = obs * flip, act * flip[2:]
        r2 = reward_fn(back, obs_m, act_m, dynamics_fn(back, obs_m, act_m))
        assert r1 == pytest.approx(r2, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.tuples(finite, finite, finite, finite), st.tuples(finite, finite))
    def test_step_is_pure(self, s, a):
        spec = EnvSpec()
        from mabe.envs import EnvState

        st0 = EnvState(np.array(s), 0)
        x1 = env_step(spec, st0, np.array(a))
        x2 = env_step(spec, st0, np.array(a))
        np.testing.assert_array_equal(x1[0].obs, x2[0].obs)
        assert x1[1] == x2[1]


class TestPendulum:
    def test_hanging_rest_is_equilibrium(self):
        spec = EnvSpec(kind="pendulum", init_scale=0.0)
        s2, _, _ = env_step(spec, env_reset(spec, 0), np.zeros(1))
        np.testing.assert_array_equal(s2.obs, np.zeros(2))

    def test_semi_implicit_euler(self):
        spec = EnvSpec(kind="pendulum", friction=0.0, dt=0.05, max_torque=2.0)
        th, thd = 0.3, -0.2
        nxt = dynamics_fn(spec, np.array([th, thd]), np.array([0.5]))
        acc = 0.5 * 2.0 - 9.81 * math.sin(th)
        thd2 = thd + acc * 0.05
        np.testing.assert_allclose(nxt, [th + thd2 * 0.05, thd2], rtol=1e-14)


def mean_return(spec, kind, n=100):
    rng = np.random.default_rng(0)
    pol = make_collector(kind, spec, rng)
    return np.mean([rollout_episode(spec, pol, seed=i).total_return for i in range(n)])


class TestControllers:
    def test_random_uniform_in_box(self):
        from scipy import stats

        spec = EnvSpec()
        rng = np.random.default_rng(0)
        draws = np.array([scripted_policy("random", spec, np.zeros(4), 0.0, rng) for _ in range(10_000)])
        assert draws.min() >= -1 and draws.max() <= 1
        for j in range(2):
            assert stats.kstest(draws[:, j], stats.uniform(loc=-1, scale=2).cdf).pvalue > 1e-3

    def test_noise_free_expert_is_deterministic(self):
        spec = EnvSpec()
        obs = np.array([0.1, 0.2, 0.3, -0.1])
        a = scripted_policy("expert", spec, obs, 0.0, 1)
        b = scripted_policy("expert", spec, obs, 0.0, 99)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("spec", [
        EnvSpec(),
        EnvSpec(reward="goal"),
        EnvSpec(friction=0.45, direction=(-1.0, 0.0)),
        EnvSpec(kind="pendulum", reward="goal", friction=0.01),
        EnvSpec(kind="pendulum", friction=0.01),
    ], ids=["pm-directional", "pm-goal", "pm-ice-backward", "pendulum-goal", "pendulum-directional"])
    def test_quality_ordering(self, spec):
        e, m, r = (mean_return(spec, k) for k in ("expert", "medium", "random"))
        assert e > m > r

    def test_blended_endpoints(self):
        spec = EnvSpec()
        lo = make_blended_collector(0.0, spec, np.random.default_rng(0))
        hi = make_blended_collector(1.0, spec, np.random.default_rng(0))
        r_lo = np.mean([rollout_episode(spec, lo, seed=i).total_return for i in range(20)])
        r_hi = np.mean([rollout_episode(spec, hi, seed=i).total_return for i in range(20)])
        assert r_hi > r_lo + 50


class TestRollout:
    def test_horizon_one(self):
        t = rollout_episode(EnvSpec(), lambda o: np.zeros(2), horizon=1)
        assert len(t) == 1 and bool(t.dones[0])

    def test_repeatable(self):
        pol = lambda o: np.array([0.5, -0.2]) - 0.1 * o[2:]  # noqa: E731
        a = rollout_episode(EnvSpec(), pol, seed=4)
        b = rollout_episode(EnvSpec(), pol, seed=4)
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.rewards, b.rewards)

    def test_returns_recomputed(self):
        spec = EnvSpec()
        t = rollout_episode(spec, make_collector("medium", spec, np.random.default_rng(1)), seed=2)
        total, disc = 0.0, 0.0
        for k, (s, a, s2) in enumerate(zip(t.obs, t.actions, t.next_obs)):
            r = float(reward_fn(spec, s, a, s2))
            total += r
            disc += 0.9 ** k * r
        assert t.total_return == pytest.approx(total, rel=1e-12)
        assert t.discounted_return(0.9) == pytest.approx(disc, rel=1e-12)
        assert t.dones[-1] and not t.dones[:-1].any()
