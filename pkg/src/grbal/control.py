"""Sampling-based MPC over a learned model and the online adaptation loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import DynamicsModel, rollout
from .errors import ArgumentError, ConfigError, ControlError, NumericError


@dataclass
class ControllerConfig:
    planner: str = "mppi"
    n_candidates: int = 256
    horizon: int = 10
    temperature: float = 1.0
    # per-dim noise std; None means 0.3 * (high - low)
    noise_sigma: float | list | None = None
    action_low: float | list = -1.0
    action_high: float | list = 1.0

    def validate(self, action_dim: int | None = None):
        if self.planner not in ("mppi", "rs"):
            raise ConfigError(f"planner must be 'mppi' or 'rs', got {self.planner!r}")
        if self.n_candidates < 1:
            raise ConfigError("controller.n_candidates must be >= 1")
        if self.horizon < 1:
            raise ConfigError("controller.horizon must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("controller.temperature must be > 0")
        lo, hi = self.bounds(action_dim or 1)
        if np.any(hi < lo):
            raise ConfigError("controller action bounds are inverted")
        if np.any(self.sigma(action_dim or 1) <= 0):
            raise ConfigError("controller.noise_sigma must be > 0")
        return self

    def bounds(self, action_dim):
        lo = np.broadcast_to(np.asarray(self.action_low, dtype=np.float64), (action_dim,))
        hi = np.broadcast_to(np.asarray(self.action_high, dtype=np.float64), (action_dim,))
        return lo, hi

    def sigma(self, action_dim):
        if self.noise_sigma is None:
            lo, hi = self.bounds(action_dim)
            return 0.3 * (hi - lo)
        return np.broadcast_to(np.asarray(self.noise_sigma, dtype=np.float64), (action_dim,))


@dataclass
class TaskSpec:
    """Reward ``r(S, A, S_next)`` evaluated row-wise on batches."""

    reward: Callable
    horizon: int = 200
    discount: float = 1.0

    @classmethod
    def for_env(cls, env, horizon=None):
        return cls(reward=env.reward, horizon=env.horizon if horizon is None else horizon)


def sequence_returns(model: DynamicsModel, theta, s, action_seqs, task: TaskSpec, context=None):
    """Summed (discounted) model-predicted reward of each candidate action sequence."""
    n, H, _ = action_seqs.shape
    try:
        states = rollout(model, theta, s, action_seqs, context)
    except NumericError:
        return np.full(n, -np.inf)
    total = np.zeros(n)
    g = 1.0
    for h in range(H):
        total += g * task.reward(states[:, h], action_seqs[:, h], states[:, h + 1])
        g *= task.discount
    return total


def plan_random_shooting(model, theta, s, task, cfg: ControllerConfig, rng, context=None):
    """Uniform candidates; returns the first action of the best (lowest index on ties)."""
    return _random_shooting(model, theta, s, task, cfg, rng, context)[0]


def _random_shooting(model, theta, s, task, cfg, rng, context):
    A = model.action_dim
    lo, hi = cfg.bounds(A)
    seqs = rng.uniform(lo, hi, size=(cfg.n_candidates, cfg.horizon, A))
    returns = sequence_returns(model, theta, s, seqs, task, context)
    if not np.any(np.isfinite(returns)):
        raise ControlError("every random-shooting candidate produced a non-finite return")
    returns = np.where(np.isfinite(returns), returns, -np.inf)
    best = int(np.argmax(returns))
    return seqs[best, 0].copy(), float(returns[best])


def mppi_weights(returns, temperature):
    if temperature <= 0:
        raise ConfigError("MPPI temperature must be > 0")
    returns = np.asarray(returns, dtype=np.float64)
    if not np.all(np.isfinite(returns)):
        raise ControlError("non-finite MPPI candidate return")
    w = np.exp((returns - returns.max()) / temperature)
    return w / w.sum()


def mppi_combine(candidates, returns, temperature):
    """Return-weighted average of candidate sequences, reduced in candidate order."""
    w = mppi_weights(returns, temperature)
    return np.tensordot(w, candidates, axes=(0, 0)), w


def shift_warm_start(mean_seq):
    """Drop the executed first action and append a zero action."""
    out = np.zeros_like(mean_seq)
    out[:-1] = mean_seq[1:]
    return out


def plan_mppi(model, theta, s, task, cfg: ControllerConfig, warm_start_mean, rng, context=None):
    """One MPPI iteration around ``warm_start_mean`` (H, A).

    Returns ``(action, averaged_sequence)``; feed ``shift_warm_start`` of the
    averaged sequence to the next call.
    """
    action, avg, _ = _mppi(model, theta, s, task, cfg, warm_start_mean, rng, context)
    return action, avg


def _mppi(model, theta, s, task, cfg, warm_start_mean, rng, context):
    if cfg.temperature <= 0:
        raise ConfigError("MPPI temperature must be > 0")
    A = model.action_dim
    lo, hi = cfg.bounds(A)
    mean = np.asarray(warm_start_mean, dtype=np.float64)
    if mean.shape != (cfg.horizon, A):
        raise ArgumentError(f"warm start must have shape {(cfg.horizon, A)}, got {mean.shape}")
    noise = rng.normal(0.0, 1.0, size=(cfg.n_candidates, cfg.horizon, A)) * cfg.sigma(A)
    cand = np.clip(mean + noise, lo, hi)
    returns = sequence_returns(model, theta, s, cand, task, context)
    avg, w = mppi_combine(cand, returns, cfg.temperature)
    return avg[0].copy(), avg, float(w @ returns)


@dataclass
class EpisodeResult:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    truncated: bool = False
    adapted: list = field(default_factory=list)
    planner_cost: list = field(default_factory=list)
    params: list = field(default_factory=list)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    def __len__(self):
        return len(self.rewards)

    def arrays(self):
        return self.states, self.actions, self.next_states

    def log_records(self):
        for t in range(len(self)):
            yield {"t": t, "s": self.states[t].tolist(), "a": self.actions[t].tolist(),
                   "r": float(self.rewards[t]), "s_next": self.next_states[t].tolist(),
                   "adapted_flag": bool(self.adapted[t]) if self.adapted else False,
                   "planner_cost": float(self.planner_cost[t]) if self.planner_cost else 0.0}

    def write_log(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.log_records():
                fh.write(json.dumps(rec) + "\n")


def _finish(S, A, S2, R, truncated, adapted=(), cost=(), params=()):
    if not S:
        return EpisodeResult(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0),
                             truncated, list(adapted), list(cost), list(params))
    return EpisodeResult(np.array(S), np.array(A), np.array(S2), np.array(R, dtype=np.float64),
                         truncated, list(adapted), list(cost), list(params))


def run_random_episode(env, rng, horizon=None) -> EpisodeResult:
    """Uniform-random actions within [-1, 1]."""
    s = env.state if env.state is not None and env.t == 0 else env.reset()
    T = env.horizon if horizon is None else horizon
    S, A, S2, R = [], [], [], []
    for _ in range(T):
        a = rng.uniform(-1.0, 1.0, size=env.action_dim)
        s2, r, done = env.step(a)
        if env.fault:
            return _finish(S, A, S2, R, True)
        S.append(s); A.append(a); S2.append(s2); R.append(r)
        s = s2
        if done:
            break
    return _finish(S, A, S2, R, False)


def run_adaptive_episode(meta, model: DynamicsModel, env, task: TaskSpec, ctrl_cfg: ControllerConfig,
                         M: int, variant: str | None = None, rng=None, de_lr: float = 0.0,
                         record_params: bool = False) -> EpisodeResult:
    """Online adaptation loop: adapt from the last min(M, t) steps, plan, act.

    ``variant`` is one of "grbal", "rebal", "de" (single SGD step with rate
    ``de_lr``, i.e. dynamic evaluation) or "none". Parameters are recomputed
    from the prior at every step; adaptation never accumulates.
    """
    from .meta import adapt_for_planning  # local import: meta depends on control

    if M < 1:
        raise ArgumentError("M must be >= 1")
    variant = variant or meta.variant
    rng = np.random.default_rng(0) if rng is None else rng
    ctrl_cfg.validate(model.action_dim)
    s = env.state if env.state is not None and env.t == 0 else env.reset()
    T = task.horizon
    H, A_dim = ctrl_cfg.horizon, model.action_dim
    mean = np.zeros((H, A_dim))
    S, A, S2, R, adapted, cost, params = [], [], [], [], [], [], []
    truncated = False
    for t in range(T):
        lo = max(0, t - M)
        window = (np.array(S[lo:t]), np.array(A[lo:t]), np.array(S2[lo:t])) if t > 0 else None
        theta, context, did = adapt_for_planning(meta, model, window, variant, de_lr)
        if record_params:
            params.append(theta if context is None else (theta, context))
        if ctrl_cfg.planner == "mppi":
            a, avg, expected = _mppi(model, theta, s, task, ctrl_cfg, mean, rng, context)
            mean = shift_warm_start(avg)
        else:
            a, expected = _random_shooting(model, theta, s, task, ctrl_cfg, rng, context)
        s2, r, done = env.step(a)
        if env.fault:
            truncated = True
            break
        S.append(s); A.append(a); S2.append(s2); R.append(r)
        adapted.append(did)
        cost.append(-expected)
        s = s2
        if done:
            break
    return _finish(S, A, S2, R, truncated, adapted, cost, params)
