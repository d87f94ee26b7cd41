import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import RegularGridInterpolator

from grbal.control import (ControllerConfig, TaskSpec, mppi_combine, mppi_weights, plan_mppi,
                           plan_random_shooting, run_adaptive_episode, sequence_returns, shift_warm_start)
from grbal.dynamics import DynamicsModel
from grbal.envs import EnvInstance, make_env
from grbal.errors import ArgumentError, ConfigError, ControlError
from grbal.meta import grbal_update, init_meta

DT = 0.1


class DoubleIntegrator(EnvInstance):
    """p' = p + dt v, v' = v + dt u; regulate to the origin."""

    family = "double_integrator"
    state_dim = 2
    action_dim = 1
    dt = DT

    def nominal_state(self):
        return np.array([1.0, 0.0])

    def _advance(self, s, a, cfg, h):
        return np.array([s[0] + h * s[1], s[1] + h * a[0]])

    def reward(self, s, a, s_next):
        return -(s_next[:, 0] ** 2 + 0.1 * s_next[:, 1] ** 2) - 0.01 * a[:, 0] ** 2


def linear_model():
    """Exact double-integrator model: identity normalizer, no hidden layers."""
    model = DynamicsModel.build(2, 1, hidden=())
    W = np.array([[0.0, 0.0], [DT, 0.0], [0.0, DT]])
    return model, model.net.pack([(W, np.zeros(2))])


def task_for(env, horizon=None):
    return TaskSpec.for_env(env, horizon)


# MPPI weights --------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64), st.floats(1e-3, 1e3))
def test_mppi_weights_normalized(returns, lam):
    w = mppi_weights(returns, lam)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-12
    assert w[int(np.argmax(returns))] == w.max()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-4096, 4096), min_size=1, max_size=32), st.integers(0, 30), st.booleans())
def test_mppi_shift_invariance_bit_exact(ticks, k, negative):
    # returns on a 1/8 grid and a power-of-two shift are exactly representable,
    # so R + c - max(R + c) == R - max(R) bit for bit
    R = np.array(ticks, dtype=np.float64) / 8.0
    c = -float(2 ** k) if negative else float(2 ** k)
    assert np.array_equal(mppi_weights(R, 0.7), mppi_weights(R + c, 0.7))


def test_mppi_extremes():
    R = np.array([1.0, 3.0, 2.0])
    assert np.array_equal(mppi_weights(R, 1e-6), [0.0, 1.0, 0.0])
    assert np.allclose(mppi_weights(R, 1e12), 1.0 / 3.0, rtol=0, atol=1e-12)
    with pytest.raises(ConfigError):
        mppi_weights(R, 0.0)
    with pytest.raises(ControlError):
        mppi_weights([1.0, np.nan], 1.0)


def test_mppi_combine_single_candidate_identity():
    cand = np.random.default_rng(0).normal(size=(1, 5, 2))
    avg, w = mppi_combine(cand, [-3.0], 0.5)
    assert np.array_equal(w, [1.0])
    assert np.array_equal(avg, cand[0])


def test_shift_warm_start():
    m = np.arange(8.0).reshape(4, 2)
    out = shift_warm_start(m)
    assert np.array_equal(out[:3], m[1:])
    assert np.array_equal(out[3], [0.0, 0.0])


# planner reductions -------------------------------------------------------------------


def test_mppi_single_candidate_reduction():
    model, theta = linear_model()
    env = DoubleIntegrator([], init_std=0.0)
    cfg = ControllerConfig(n_candidates=1, horizon=4, noise_sigma=0.2)
    mean = np.full((4, 1), 0.1)
    a, avg = plan_mppi(model, theta, np.array([1.0, 0.0]), task_for(env), cfg, mean, np.random.default_rng(3))
    noise = np.random.default_rng(3).normal(0.0, 1.0, size=(1, 4, 1)) * 0.2
    expect = np.clip(mean + noise, -1, 1)[0]
    assert np.array_equal(avg, expect)
    assert np.array_equal(a, expect[0])


def test_random_shooting_horizon_one_is_greedy():
    model, theta = linear_model()
    env = DoubleIntegrator([], init_std=0.0)
    s = np.array([0.4, -0.3])
    cfg = ControllerConfig(planner="rs", n_candidates=64, horizon=1)
    a = plan_random_shooting(model, theta, s, task_for(env), cfg, np.random.default_rng(9))
    cands = np.random.default_rng(9).uniform(-1, 1, size=(64, 1, 1))[:, 0]
    nxt = np.stack([s[0] + DT * s[1] + 0 * cands[:, 0], s[1] + DT * cands[:, 0]], axis=1)
    r = env.reward(np.tile(s, (64, 1)), cands, nxt)
    assert np.array_equal(a, cands[int(np.argmax(r))])


def test_random_shooting_ties_pick_lowest_index():
    model, theta = linear_model()
    flat = TaskSpec(reward=lambda S, A, S2: np.zeros(S.shape[0]), horizon=10)
    cfg = ControllerConfig(planner="rs", n_candidates=32, horizon=3)
    a = plan_random_shooting(model, theta, np.zeros(2), flat, cfg, np.random.default_rng(5))
    first = np.random.default_rng(5).uniform(-1, 1, size=(32, 3, 1))[0, 0]
    assert np.array_equal(a, first)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(-6, 6))
def test_random_shooting_invariant_to_reward_offset(seed, k):
    model, theta = linear_model()
    env = DoubleIntegrator([], init_std=0.0)
    cfg = ControllerConfig(planner="rs", n_candidates=16, horizon=3)
    shifted = TaskSpec(reward=lambda S, A, S2: env.reward(S, A, S2) + float(2 ** k), horizon=10)
    s = np.array([0.7, 0.1])
    a1 = plan_random_shooting(model, theta, s, task_for(env), cfg, np.random.default_rng(seed))
    a2 = plan_random_shooting(model, theta, s, shifted, cfg, np.random.default_rng(seed))
    seqs = np.random.default_rng(seed).uniform(-1, 1, size=(16, 3, 1))
    R = np.sort(sequence_returns(model, theta, s, seqs, task_for(env)))
    if R[-1] - R[-2] > 1e-9 * 2 ** abs(k):
        assert np.array_equal(a1, a2)


def test_controller_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(planner="cem").validate()
    with pytest.raises(ConfigError):
        ControllerConfig(temperature=0).validate()
    with pytest.raises(ConfigError):
        ControllerConfig(n_candidates=0).validate()
    model, theta = linear_model()
    with pytest.raises(ArgumentError):
        plan_mppi(model, theta, np.zeros(2), TaskSpec(lambda *x: 0), ControllerConfig(horizon=3),
                  np.zeros((4, 1)), np.random.default_rng(0))


# double-integrator benchmark ------------------------------------------------------------


def dp_return(T):
    """Finite-horizon DP on a (p, v) grid with linear interpolation; returns the achieved return."""
    env = DoubleIntegrator([], init_std=0.0, noise_sigma=0.0, horizon=T)
    ps = np.linspace(-1.5, 1.5, 121)
    vs = np.linspace(-2.0, 2.0, 81)
    us = np.linspace(-1.0, 1.0, 41)
    P, V = np.meshgrid(ps, vs, indexing="ij")
    S = np.stack([P.ravel(), V.ravel()], axis=1)
    value = np.zeros(P.shape)
    policies = []
    for _ in range(T):
        interp = RegularGridInterpolator((ps, vs), value)
        q = np.empty((S.shape[0], us.size))
        for j, u in enumerate(us):
            nxt = np.stack([S[:, 0] + DT * S[:, 1], S[:, 1] + DT * u], axis=1)
            r = env.reward(S, np.full((S.shape[0], 1), u), nxt)
            nxt_c = np.stack([np.clip(nxt[:, 0], ps[0], ps[-1]), np.clip(nxt[:, 1], vs[0], vs[-1])], axis=1)
            q[:, j] = r + interp(nxt_c)
        value = q.max(axis=1).reshape(P.shape)
        policies.append(RegularGridInterpolator((ps, vs), us[q.argmax(axis=1)].reshape(P.shape),
                                                method="nearest"))
    policies.reverse()
    s = env.reset()
    total = 0.0
    for t in range(T):
        s, r, _ = env.step(np.array([float(policies[t](s[None])[0])]))
        total += r
    return total


def test_mppi_double_integrator_near_dp_optimum():
    T = 40
    model, theta = linear_model()
    meta = init_meta(model, "mb", np.random.default_rng(0))
    meta.theta = theta
    env = DoubleIntegrator([], init_std=0.0, noise_sigma=0.0, horizon=T)
    cfg = ControllerConfig(n_candidates=256, horizon=10, temperature=0.05, noise_sigma=0.5)
    ep = run_adaptive_episode(meta, model, env, task_for(env, T), cfg, M=4, variant="none",
                              rng=np.random.default_rng(0))
    opt = dp_return(T)
    assert ep.total_return >= opt - 0.15 * abs(opt), (ep.total_return, opt)


# episode loop --------------------------------------------------------------------------


def payload_setup(variant="grbal"):
    model = DynamicsModel.build(2, 1, (8,), ignore_dims=(0,))
    meta = init_meta(model, variant, np.random.default_rng(1), inner_lr=0.05)
    return model, meta


def test_de_lr_zero_equals_plain_model_episode():
    model, meta = payload_setup("mb")
    cfg = ControllerConfig(n_candidates=32, horizon=5)
    eps = []
    for variant, lr in (("de", 0.0), ("none", 0.0)):
        env = make_env("payload", [1.0, 0.5], seed=4, horizon=30)
        eps.append(run_adaptive_episode(meta, model, env, task_for(env), cfg, 8, variant,
                                        np.random.default_rng(2), de_lr=lr))
    for a, b in zip(eps[0].arrays(), eps[1].arrays()):
        assert np.array_equal(a, b)
    assert eps[0].total_return == eps[1].total_return


def test_adapted_parameters_replay_oracle():
    model, meta = payload_setup()
    M = 6
    cfg = ControllerConfig(n_candidates=16, horizon=4)
    env = make_env("payload", [0.5, 0.3], seed=7, horizon=25)
    ep = run_adaptive_episode(meta, model, env, task_for(env), cfg, M, "grbal", np.random.default_rng(0),
                              record_params=True)
    assert len(ep.params) == len(ep) == 25
    assert np.array_equal(ep.params[0], meta.theta)
    assert ep.adapted == [False] + [True] * 24
    for t in range(1, len(ep)):
        lo = max(0, t - M)
        window = (ep.states[lo:t], ep.actions[lo:t], ep.next_states[lo:t])
        assert np.array_equal(ep.params[t], grbal_update(meta, model, window))


def test_episode_is_deterministic_and_log_is_ndjson(tmp_path):
    model, meta = payload_setup()
    cfg = ControllerConfig(n_candidates=16, horizon=4)
    runs = []
    for _ in range(2):
        env = make_env("payload", [0.5, 0.3], seed=7, horizon=12)
        runs.append(run_adaptive_episode(meta, model, env, task_for(env), cfg, 4, "grbal",
                                         np.random.default_rng(11)))
    assert np.array_equal(runs[0].actions, runs[1].actions)
    runs[0].write_log(tmp_path / "ep.ndjson")
    recs = [json.loads(line) for line in (tmp_path / "ep.ndjson").read_text().splitlines()]
    assert len(recs) == 12
    assert set(recs[0]) == {"t", "s", "a", "r", "s_next", "adapted_flag", "planner_cost"}
    assert [r["t"] for r in recs] == list(range(12))
    assert sum(r["r"] for r in recs) == pytest.approx(runs[0].total_return, rel=1e-12)


def test_episode_rejects_bad_window():
    model, meta = payload_setup()
    env = make_env("payload", [0.5, 0.3], seed=7, horizon=5)
    with pytest.raises(ArgumentError):
        run_adaptive_episode(meta, model, env, task_for(env), ControllerConfig(), 0)
