"""Neural dynamics model: normalization, delta prediction, loss and rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, DimensionError, NumericError
from .tensor import Mlp, mlp_forward, mlp_loss

STD_FLOOR = 1e-6


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    env_episode_id: int = 0
    t: int = 0

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.float64)
        if self.s.shape != self.s_next.shape:
            raise DimensionError("s_next", self.s.shape, self.s_next.shape)
        if self.t < 0:
            raise ArgumentError(f"negative timestep {self.t}")

    def to_json(self) -> dict:
        return {"s": self.s.tolist(), "a": self.a.tolist(), "s_next": self.s_next.tolist(),
                "env_episode_id": int(self.env_episode_id), "t": int(self.t)}

    @classmethod
    def from_json(cls, rec: dict) -> "Transition":
        return cls(rec["s"], rec["a"], rec["s_next"], rec.get("env_episode_id", 0), rec.get("t", 0))


def stack_transitions(transitions):
    """(S, A, S_next) matrices from a list of Transition or an existing triple."""
    if isinstance(transitions, tuple) and len(transitions) == 3:
        return tuple(np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in transitions)
    transitions = list(transitions)
    if not transitions:
        raise ArgumentError("empty transition batch")
    S = np.stack([tr.s for tr in transitions])
    A = np.stack([tr.a for tr in transitions])
    S2 = np.stack([tr.s_next for tr in transitions])
    return S, A, S2


def save_dataset(path, transitions) -> None:
    """Newline-delimited JSON, one Transition per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for tr in transitions:
            fh.write(json.dumps(tr.to_json()) + "\n")


def load_dataset(path) -> list[Transition]:
    with open(path) as fh:
        return [Transition.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class Normalizer:
    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray
    d_mean: np.ndarray
    d_std: np.ndarray

    def __post_init__(self):
        for name in ("s_mean", "s_std", "a_mean", "a_std", "d_mean", "d_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("s_std", "a_std", "d_std"):
            setattr(self, name, np.maximum(getattr(self, name), STD_FLOOR))

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(action_dim),
                   np.ones(action_dim), np.zeros(state_dim), np.ones(state_dim))

    def norm_state(self, s):
        return (s - self.s_mean) / self.s_std

    def norm_action(self, a):
        return (a - self.a_mean) / self.a_std

    def norm_delta(self, d):
        return (d - self.d_mean) / self.d_std

    def denorm_delta(self, d):
        return d * self.d_std + self.d_mean

    def denorm_state(self, s):
        return s * self.s_std + self.s_mean

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("s_mean", "s_std", "a_mean", "a_std", "d_mean", "d_std")}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v) for k, v in d.items()})


def fit_normalizer(transitions) -> Normalizer:
    """Per-dimension empirical mean and (population) std of states, actions and deltas."""
    if isinstance(transitions, tuple):
        S, A, S2 = stack_transitions(transitions)
    else:
        transitions = list(transitions)
        if len(transitions) < 2:
            raise DataError(f"need at least 2 transitions to fit a normalizer, got {len(transitions)}")
        S, A, S2 = stack_transitions(transitions)
    if S.shape[0] < 2:
        raise DataError(f"need at least 2 transitions to fit a normalizer, got {S.shape[0]}")
    D = S2 - S
    return Normalizer(S.mean(0), S.std(0), A.mean(0), A.std(0), D.mean(0), D.std(0))


@dataclass
class DynamicsModel:
    """Gaussian model of s' given (s, a) with a network-parameterized mean delta.

    The network sees normalized ``[s; a]`` (plus an optional context vector
    for the recurrent learner) and predicts the normalized state delta.
    The variance is fixed, so the negative log-likelihood is an affine
    function of the normalized-space squared error.
    """

    state_dim: int
    action_dim: int
    net: Mlp
    normalizer: Normalizer = None
    variance: float = 1.0
    context_dim: int = 0
    # absolute-position dims hidden from the network (their inputs are zeroed)
    ignore_dims: tuple[int, ...] = ()

    def __post_init__(self):
        self.ignore_dims = tuple(int(i) for i in self.ignore_dims)
        want = self.state_dim + self.action_dim + self.context_dim
        if self.net.in_dim != want or self.net.out_dim != self.state_dim:
            raise DimensionError("network shape", (want, self.state_dim),
                                 (self.net.in_dim, self.net.out_dim))
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(self.state_dim, self.action_dim)

    @classmethod
    def build(cls, state_dim, action_dim, hidden=(32, 32, 32), context_dim=0, normalizer=None,
              ignore_dims=()):
        net = Mlp(state_dim + action_dim + context_dim, tuple(hidden), state_dim)
        return cls(state_dim, action_dim, net, normalizer, context_dim=context_dim,
                   ignore_dims=tuple(ignore_dims))

    def with_normalizer(self, normalizer: Normalizer) -> "DynamicsModel":
        return DynamicsModel(self.state_dim, self.action_dim, self.net, normalizer,
                             self.variance, self.context_dim, self.ignore_dims)

    def inputs(self, S, A, context=None):
        """Normalized network input rows for state/action rows."""
        nz = self.normalizer
        ns = nz.norm_state(S)
        if self.ignore_dims:
            ns[:, list(self.ignore_dims)] = 0.0
        parts = [ns, nz.norm_action(A)]
        if self.context_dim:
            if context is None:
                context = np.zeros((S.shape[0], self.context_dim))
            context = np.broadcast_to(context, (S.shape[0], self.context_dim))
            parts.append(context)
        return np.concatenate(parts, axis=1)

    def targets(self, S, S2):
        return self.normalizer.norm_delta(S2 - S)

    def xy(self, transitions, context=None):
        S, A, S2 = stack_transitions(transitions)
        return self.inputs(S, A, context), self.targets(S, S2)


def _rows(model, s, a):
    S = np.asarray(s, dtype=np.float64)
    A = np.asarray(a, dtype=np.float64)
    single = S.ndim == 1
    S = np.atleast_2d(S)
    A = np.atleast_2d(A)
    if S.shape[1] != model.state_dim:
        raise DimensionError("state", model.state_dim, S.shape[-1])
    if A.shape[1] != model.action_dim:
        raise DimensionError("action", model.action_dim, A.shape[-1])
    return S, A, single


def predict(model: DynamicsModel, theta, s, a, context=None) -> np.ndarray:
    """Mean next state ``s + denormalized network delta``; accepts single rows or batches."""
    S, A, single = _rows(model, s, a)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(A))):
        raise ArgumentError("non-finite state or action passed to predict")
    out = S + model.normalizer.denorm_delta(mlp_forward(model.net, theta, model.inputs(S, A, context)))
    return out[0] if single else out


def nll_loss(model: DynamicsModel, theta, transitions, context=None) -> float:
    """Mean squared normalized-delta error over transitions and state dims."""
    X, Y = model.xy(transitions, context)
    if X.shape[0] == 0:
        raise ArgumentError("empty transition batch")
    return mlp_loss(model.net, theta, X, Y)


def gaussian_nll(model: DynamicsModel, theta, transitions, context=None) -> float:
    """Mean per-transition negative log-likelihood in normalized delta space."""
    mse = nll_loss(model, theta, transitions, context)
    d = model.state_dim
    return 0.5 * d * mse / model.variance + 0.5 * d * np.log(2.0 * np.pi * model.variance)


def rollout(model: DynamicsModel, theta, s0, actions, context=None) -> np.ndarray:
    """Iterate mean predictions. ``actions`` is (H, A) or (n, H, A).

    Returns states of shape (H+1, S) or (n, H+1, S).
    """
    actions = np.asarray(actions, dtype=np.float64)
    single = actions.ndim == 2
    if single:
        actions = actions[None]
    n, H, _ = actions.shape
    if H < 1:
        raise ArgumentError("rollout horizon must be >= 1")
    s = np.broadcast_to(np.asarray(s0, dtype=np.float64), (n, model.state_dim)).copy()
    out = np.empty((n, H + 1, model.state_dim))
    out[:, 0] = s
    for h in range(H):
        try:
            s = predict(model, theta, s, actions[:, h], context)
        except (NumericError, ArgumentError) as exc:
            raise NumericError(f"non-finite state during rollout at step {h}: {exc}") from exc
        if not np.all(np.isfinite(s)):
            raise NumericError(f"non-finite state during rollout at step {h}")
        out[:, h + 1] = s
    return out[0] if single else out
