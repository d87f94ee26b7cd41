"""Meta-training of adaptive dynamics models over trajectory segments.

A segment is M consecutive transitions used to adapt the model followed by
the next K transitions on which the adapted model is scored. Two adaptive
learners are supported:

* ``grbal`` - one gradient step on the adaptation slice with learned
  per-parameter (or scalar) rates ``psi``; meta-gradients flow through the
  step exactly, including the Hessian-vector term.
* ``rebal`` - a gated recurrent cell (weights ``psi``) reads the adaptation
  slice; its final hidden state is appended to the prediction-head input.

``mb`` trains the same network without adaptation, on the same segments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dynamics import DynamicsModel, Normalizer, Transition, fit_normalizer
from .errors import ArgumentError, ArtifactError, ConfigError, DataError, DimensionError
from .seeding import derive_rng, restore_rng, rng_state
from .tensor import (RecurrentCell, _gru_backward, _gru_forward, inner_step, load_checkpoint, mlp_grad_through_update,
                     mlp_loss, mlp_loss_grad, save_checkpoint)

log = logging.getLogger(__name__)

VARIANTS = ("grbal", "rebal", "mb")
LOG_COLUMNS = ("iteration", "meta_loss", "pre_update_eval_error", "post_update_eval_error",
               "env_steps_collected")


def _slice_arrays(slice_):
    if slice_ is None:
        raise ArgumentError("empty adaptation slice")
    if isinstance(slice_, tuple):
        S, A, S2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in slice_)
    else:
        slice_ = list(slice_)
        if not slice_:
            raise ArgumentError("empty adaptation slice")
        S = np.stack([tr.s for tr in slice_])
        A = np.stack([tr.a for tr in slice_])
        S2 = np.stack([tr.s_next for tr in slice_])
    if S.shape[0] == 0 or S.size == 0:
        raise ArgumentError("empty adaptation slice")
    if not (S.shape[0] == A.shape[0] == S2.shape[0]):
        raise ArgumentError("adaptation slice arrays have different lengths")
    return S, A, S2


@dataclass
class Segment:
    """Adaptation slice [t-M, t) and evaluation slice [t, t+K) of one episode."""

    episode_id: int
    t: int
    adapt: tuple
    eval: tuple

    @property
    def M(self):
        return self.adapt[0].shape[0]

    @property
    def K(self):
        return self.eval[0].shape[0]

    def validate(self, index=None):
        name = f"segment {index}" if index is not None else "segment"
        try:
            _slice_arrays(self.adapt)
            _slice_arrays(self.eval)
        except ArgumentError as exc:
            raise ArgumentError(f"{name} (episode {self.episode_id}, t={self.t}): {exc}")
        if self.t < self.M:
            raise ArgumentError(f"{name}: adaptation slice starts before the episode")
        # contiguity: the last adaptation transition ends where evaluation starts
        if not np.array_equal(self.adapt[2][-1], self.eval[0][0]):
            raise ArgumentError(f"{name}: adaptation slice does not end where evaluation begins")


@dataclass
class MetaParams:
    variant: str
    theta: np.ndarray
    psi: np.ndarray
    cell: RecurrentCell | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        if self.variant == "rebal":
            if self.cell is None or self.psi.shape != (self.cell.n_params,):
                raise DimensionError("ReBAL psi", (self.cell.n_params if self.cell else "?",),
                                     self.psi.shape)
        elif self.variant == "grbal" and self.psi.ndim == 1 and self.psi.shape != self.theta.shape:
            raise DimensionError("GrBAL psi", self.theta.shape, self.psi.shape)

    def copy(self) -> "MetaParams":
        return MetaParams(self.variant, self.theta.copy(), self.psi.copy(), self.cell)


def build_model(env_cls, variant="grbal", hidden=(32, 32, 32), rebal_hidden=16) -> DynamicsModel:
    context = rebal_hidden if variant == "rebal" else 0
    return DynamicsModel.build(env_cls.state_dim, env_cls.action_dim, hidden, context_dim=context,
                               ignore_dims=env_cls.translation_dims)


def init_meta(model: DynamicsModel, variant: str, rng, inner_lr=0.01, psi_mode="vector") -> MetaParams:
    theta = model.net.init(rng)
    if variant == "grbal":
        psi = np.full(theta.shape, inner_lr) if psi_mode == "vector" else np.float64(inner_lr)
        return MetaParams("grbal", theta, psi)
    if variant == "rebal":
        cell = RecurrentCell(2 * model.state_dim + model.action_dim, model.context_dim, 1)
        return MetaParams("rebal", theta, cell.init(rng), cell)
    if variant == "mb":
        return MetaParams("mb", theta, np.zeros(0))
    raise ConfigError(f"unknown variant {variant!r}")


class ReplayBuffer:
    """Episodes of time-ordered transitions; samples legal segments uniformly."""

    def __init__(self, max_episodes: int | None = None):
        self.max_episodes = max_episodes
        self.episodes: list[dict] = []
        self._next_id = 0

    def add_episode(self, S, A, S2, env: dict | None = None, episode_id=None) -> int:
        S, A, S2 = (np.asarray(x, dtype=np.float64) for x in (S, A, S2))
        if not (S.shape[0] == A.shape[0] == S2.shape[0]):
            raise DataError("episode arrays have different lengths")
        eid = self._next_id if episode_id is None else int(episode_id)
        self._next_id = max(self._next_id, eid + 1)
        self.episodes.append({"id": eid, "S": S, "A": A, "S2": S2, "env": dict(env or {})})
        if self.max_episodes is not None and len(self.episodes) > self.max_episodes:
            self.episodes.pop(0)
        return eid

    def add_transitions(self, transitions, env=None) -> int:
        transitions = list(transitions)
        ts = [tr.t for tr in transitions]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("transitions within an episode must be strictly time-ordered")
        S = np.stack([tr.s for tr in transitions])
        A = np.stack([tr.a for tr in transitions])
        S2 = np.stack([tr.s_next for tr in transitions])
        eid = transitions[0].env_episode_id if transitions else None
        return self.add_episode(S, A, S2, env, eid)

    def __len__(self):
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(ep["S"].shape[0] for ep in self.episodes)

    def arrays(self):
        if not self.episodes:
            raise DataError("replay buffer is empty")
        return tuple(np.concatenate([ep[k] for ep in self.episodes]) for k in ("S", "A", "S2"))

    def _counts(self, M, K):
        return np.array([max(0, ep["S"].shape[0] - M - K + 1) for ep in self.episodes], dtype=np.int64)

    def n_positions(self, M, K) -> int:
        return int(self._counts(M, K).sum()) if self.episodes else 0

    def segment(self, index: int, t: int, M: int, K: int) -> Segment:
        ep = self.episodes[index]
        a, b = slice(t - M, t), slice(t, t + K)
        return Segment(ep["id"], t, (ep["S"][a], ep["A"][a], ep["S2"][a]),
                       (ep["S"][b], ep["A"][b], ep["S2"][b]))

    def sample_segments(self, n: int, M: int, K: int, rng) -> list[Segment]:
        """``n`` segments uniform over all legal (episode, t) pairs, with replacement."""
        counts = self._counts(M, K) if self.episodes else np.zeros(0, dtype=np.int64)
        total = int(counts.sum())
        if total < 1 or (n > total and total < 1):
            raise DataError(f"need segments of length M+K={M + K}; buffer has {total} legal positions")
        bounds = np.cumsum(counts)
        picks = rng.integers(0, total, size=n)
        out = []
        for p in picks:
            e = int(np.searchsorted(bounds, p, side="right"))
            offset = int(p - (bounds[e - 1] if e > 0 else 0))
            out.append(self.segment(e, M + offset, M, K))
        return out

    def transitions(self):
        for ep in self.episodes:
            for t in range(ep["S"].shape[0]):
                yield Transition(ep["S"][t], ep["A"][t], ep["S2"][t], ep["id"], t)

    def save(self, path) -> None:
        """Transitions as newline-delimited JSON plus a sidecar with episode descriptors."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for tr in self.transitions():
                fh.write(json.dumps(tr.to_json()) + "\n")
        meta = {"max_episodes": self.max_episodes, "next_id": self._next_id,
                "episodes": [{"id": ep["id"], "env": ep["env"], "length": int(ep["S"].shape[0])}
                             for ep in self.episodes]}
        with open(path.with_suffix(".episodes.json"), "w") as fh:
            json.dump(meta, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        path = Path(path)
        with open(path.with_suffix(".episodes.json")) as fh:
            meta = json.load(fh)
        with open(path) as fh:
            recs = [Transition.from_json(json.loads(line)) for line in fh if line.strip()]
        buf = cls(meta["max_episodes"])
        i = 0
        for ep in meta["episodes"]:
            chunk = recs[i:i + ep["length"]]
            i += ep["length"]
            buf.add_episode(np.stack([tr.s for tr in chunk]), np.stack([tr.a for tr in chunk]),
                            np.stack([tr.s_next for tr in chunk]), ep["env"], ep["id"])
        buf._next_id = meta["next_id"]
        return buf


def rebal_inputs(model: DynamicsModel, slice_):
    """Normalized (s, a, s_next - s) rows fed to the recurrent cell."""
    S, A, S2 = _slice_arrays(slice_)
    nz = model.normalizer
    ns = nz.norm_state(S)
    if model.ignore_dims:
        ns[:, list(model.ignore_dims)] = 0.0
    return np.concatenate([ns, nz.norm_action(A), nz.norm_delta(S2 - S)], axis=1)


def grbal_update(meta: MetaParams, model: DynamicsModel, adaptation_slice) -> np.ndarray:
    """theta' = theta - psi * grad of the slice MSE (one ascent step on the log-likelihood)."""
    X, T = model.xy(_slice_arrays(adaptation_slice))
    theta_prime, _, _ = inner_step(model.net, meta.theta, meta.psi, X, T)
    return theta_prime


def rebal_update(meta: MetaParams, model: DynamicsModel, adaptation_slice) -> np.ndarray:
    """Hidden state after reading the slice from a zero initial state."""
    if meta.cell is None:
        raise ArgumentError("rebal_update needs ReBAL meta-parameters")
    inputs = rebal_inputs(model, adaptation_slice)
    if inputs.shape[1] != meta.cell.in_dim:
        raise DimensionError("recurrent input", meta.cell.in_dim, inputs.shape[1])
    _, h, _ = _gru_forward(meta.cell, meta.psi, inputs[:, None, :], np.zeros((1, meta.cell.hidden_dim)))
    return h[0]


def adapt_for_planning(meta: MetaParams, model: DynamicsModel, window, variant: str, de_lr=0.0):
    """Parameters (and context) the planner should use given the recent window.

    Returns ``(theta, context_or_None, adapted_flag)``.
    """
    has_data = window is not None and len(window[0]) > 0
    context = np.zeros(model.context_dim) if model.context_dim else None
    if not has_data or variant in ("none", "mb"):
        return meta.theta, context, False
    if variant == "grbal":
        return grbal_update(meta, model, window), context, True
    if variant == "rebal":
        return meta.theta, rebal_update(meta, model, window), True
    if variant == "de":
        X, T = model.xy(_slice_arrays(window))
        theta_prime, _, _ = inner_step(model.net, meta.theta, de_lr, X, T)
        return theta_prime, context, True
    raise ConfigError(f"unknown adaptation variant {variant!r}")


def _check_segments(segments):
    segments = list(segments)
    if not segments:
        raise ArgumentError("empty segment list")
    for i, seg in enumerate(segments):
        if not isinstance(seg, Segment):
            raise ArgumentError(f"segment {i} is not a Segment")
        seg.validate(i)
    return segments


def segment_losses(meta: MetaParams, model: DynamicsModel, segments) -> np.ndarray:
    """Evaluation-slice MSE of each segment under its adapted parameters/context."""
    segments = _check_segments(segments)
    out = np.empty(len(segments))
    net = model.net
    for j, seg in enumerate(segments):
        if meta.variant == "rebal":
            ctx = rebal_update(meta, model, seg.adapt)
            X, T = model.xy(seg.eval, ctx[None, :])
            out[j] = mlp_loss(net, meta.theta, X, T)
            continue
        X, T = model.xy(seg.eval)
        theta = meta.theta
        if meta.variant == "grbal":
            theta = grbal_update(meta, model, seg.adapt)
        out[j] = mlp_loss(net, theta, X, T)
    return out


def meta_loss(meta: MetaParams, model: DynamicsModel, segments) -> float:
    """Mean over segments of the evaluation-slice loss after adaptation."""
    losses = segment_losses(meta, model, segments)
    total = 0.0
    for v in losses:
        total += v
    return float(total / len(losses))


def _rebal_gradient(meta, model, segments):
    cell = meta.cell
    N = len(segments)
    Ms = {seg.M for seg in segments}
    Ks = {seg.K for seg in segments}
    if len(Ms) != 1 or len(Ks) != 1:
        raise ArgumentError("ReBAL meta-batches need equal M and K across segments")
    K = Ks.pop()
    inputs = np.stack([rebal_inputs(model, seg.adapt) for seg in segments], axis=1)
    _, hT, cache = _gru_forward(cell, meta.psi, inputs, np.zeros((N, cell.hidden_dim)))
    ctx = np.repeat(hT, K, axis=0)
    S = np.concatenate([seg.eval[0] for seg in segments])
    A = np.concatenate([seg.eval[1] for seg in segments])
    S2 = np.concatenate([seg.eval[2] for seg in segments])
    X, T = model.inputs(S, A, ctx), model.targets(S, S2)
    loss, g_theta, dX = mlp_loss_grad(model.net, meta.theta, X, T, want_input_grad=True)
    d_ctx = dX[:, -cell.hidden_dim:].reshape(N, K, cell.hidden_dim).sum(axis=1)
    g_psi, _, _ = _gru_backward(cell, meta.psi, cache, None, d_ctx)
    return loss, g_theta, g_psi


def meta_gradient(meta: MetaParams, model: DynamicsModel, segments):
    """``(loss, grad_theta, grad_psi)`` of the mean post-adaptation segment loss."""
    segments = _check_segments(segments)
    if meta.variant == "rebal":
        return _rebal_gradient(meta, model, segments)
    N = len(segments)
    net = model.net
    total = 0.0
    g_theta = np.zeros_like(meta.theta)
    g_psi = np.zeros_like(meta.psi)
    for seg in segments:
        Xo, To = model.xy(seg.eval)
        if meta.variant == "grbal":
            Xi, Ti = model.xy(seg.adapt)
            loss, gt, gp = mlp_grad_through_update(net, meta.theta, meta.psi, Xi, Ti, Xo, To)
            g_psi += gp
        else:
            loss, gt = mlp_loss_grad(net, meta.theta, Xo, To)
        total += loss
        g_theta += gt
    return total / N, g_theta / N, g_psi / N


class Optimizer:
    """Plain SGD (default) or Adam over the (theta, psi) pair."""

    def __init__(self, kind="sgd", lr_theta=1e-3, lr_psi=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {kind!r}")
        self.kind = kind
        self.lr_theta = lr_theta
        self.lr_psi = lr_psi
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments = {}

    def _adam(self, name, x, g, lr):
        m, v = self.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        self.moments[name] = (m, v)
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self, theta, psi, g_theta, g_psi):
        if self.kind == "sgd":
            return theta - self.lr_theta * g_theta, psi - self.lr_psi * g_psi
        self.t += 1
        theta = self._adam("theta", theta, g_theta, self.lr_theta)
        if np.size(psi) and self.lr_psi != 0:
            psi = self._adam("psi", psi, g_psi, self.lr_psi)
        return theta, psi

    def blocks(self) -> dict:
        out = {}
        for name, (m, v) in sorted(self.moments.items()):
            out[f"opt_{name}_m"] = np.atleast_1d(m)
            out[f"opt_{name}_v"] = np.atleast_1d(v)
        return out

    def load_blocks(self, blocks, t, shapes):
        self.t = t
        for name, shape in shapes.items():
            if f"opt_{name}_m" in blocks:
                self.moments[name] = (blocks[f"opt_{name}_m"].reshape(shape),
                                      blocks[f"opt_{name}_v"].reshape(shape))


@dataclass
class TrainConfig:
    """Meta-training schedule. Full-scale values noted where they differ."""

    M: int = 16                  # full scale: 16-32
    K: int = 16                  # full scale: 10-32
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    psi_lr: float = 1e-3
    batch_size: int = 32         # segments per meta-batch (full scale: 500)
    epochs: int = 5              # full scale: 50
    iterations: int = 6          # data-aggregation rounds
    tasks_per_iter: int = 8      # environments sampled per round (full scale: 32)
    horizon: int = 200           # T, steps per collected episode (full scale: 1000)
    max_steps_per_epoch: int = 50
    psi_mode: str = "vector"     # vector | scalar | fixed
    optimizer: str = "adam"
    hidden: tuple = (32, 32, 32) # full scale: 3 x 512
    rebal_hidden: int = 16
    max_episodes: int | None = None
    random_rounds: int = 1       # leading rounds collected with uniform-random actions

    def validate(self):
        if self.M < 1 or self.K < 1:
            raise ConfigError("meta.M and meta.K must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("meta.batch_size must be >= 1")
        if self.psi_mode not in ("vector", "scalar", "fixed"):
            raise ConfigError(f"meta.psi_mode must be vector|scalar|fixed, got {self.psi_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"meta.optimizer must be sgd|adam, got {self.optimizer!r}")
        for name in ("epochs", "iterations", "tasks_per_iter", "horizon", "max_steps_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"meta.{name} must be >= 0")
        return self


def meta_train_step(meta: MetaParams, model: DynamicsModel, buffer: ReplayBuffer, cfg: TrainConfig,
                    rng, optimizer: Optimizer | None = None):
    """Sample N segments, take one outer step. Returns ``(new_meta, report)``."""
    available = buffer.n_positions(cfg.M, cfg.K)
    if available < cfg.batch_size:
        raise DataError(f"meta-batch needs {cfg.batch_size} segments of length {cfg.M + cfg.K}; "
                        f"buffer has {available}")
    if optimizer is None:
        optimizer = Optimizer("sgd", cfg.outer_lr, cfg.psi_lr)
    segments = buffer.sample_segments(cfg.batch_size, cfg.M, cfg.K, rng)
    loss, g_theta, g_psi = meta_gradient(meta, model, segments)
    if cfg.psi_mode == "fixed" or meta.variant == "mb":
        g_psi = np.zeros_like(meta.psi)
    theta, psi = optimizer.step(meta.theta, meta.psi, g_theta, g_psi)
    new = MetaParams(meta.variant, theta, psi, meta.cell)
    return new, {"meta_loss": loss, "grad_norm": float(np.linalg.norm(g_theta))}


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Trainer:
    """Data aggregation alternating with meta-gradient epochs.

    Round r collects ``tasks_per_iter`` episodes (uniform-random actions for
    the first ``random_rounds`` rounds, the adaptive MPC controller after),
    refits the normalizer, then runs ``epochs`` epochs of meta-batches. An
    epoch is ``ceil(legal positions / batch_size)`` steps capped at
    ``max_steps_per_epoch``.
    """

    def __init__(self, dist, cfg: TrainConfig, ctrl_cfg, variant="grbal", seed=0, out_dir=None,
                 split="train", preset_buffer: ReplayBuffer | None = None):
        from .envs import family_class

        self.dist = dist
        self.cfg = cfg.validate()
        self.ctrl_cfg = ctrl_cfg
        self.variant = variant
        self.seed = int(seed)
        self.split = split
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.env_cls = family_class(dist.family)
        self.model = build_model(self.env_cls, variant, cfg.hidden, cfg.rebal_hidden)
        self.meta = init_meta(self.model, variant, derive_rng(seed, "init"), cfg.inner_lr,
                              cfg.psi_mode)
        self.optimizer = Optimizer(cfg.optimizer, cfg.outer_lr,
                                   0.0 if cfg.psi_mode == "fixed" else cfg.psi_lr)
        self.buffer = preset_buffer if preset_buffer is not None else ReplayBuffer(cfg.max_episodes)
        self.rngs = {k: derive_rng(seed, k) for k in ("env", "sampler", "planner", "policy")}
        self.iteration = 0
        self.env_steps = 0
        self.log_rows: list[dict] = []
        if preset_buffer is not None and len(preset_buffer):
            self.model = self.model.with_normalizer(fit_normalizer(preset_buffer.arrays()))

    def identity(self) -> dict:
        return {"family": self.dist.family, "dist": asdict(self.dist), "cfg": asdict(self.cfg),
                "ctrl": asdict(self.ctrl_cfg), "variant": self.variant, "seed": self.seed,
                "split": self.split}

    @property
    def hash(self) -> str:
        return config_hash(self.identity())

    def collect(self, round_index: int):
        from .control import TaskSpec, run_adaptive_episode, run_random_episode
        from .envs import sample_env

        cfg = self.cfg
        for _ in range(cfg.tasks_per_iter):
            env = sample_env(self.dist, self.split, self.rngs["env"], horizon=cfg.horizon)
            env.reset()
            if round_index < cfg.random_rounds:
                ep = run_random_episode(env, self.rngs["policy"], cfg.horizon)
            else:
                task = TaskSpec.for_env(env, cfg.horizon)
                mode = "none" if self.variant == "mb" else self.variant
                ep = run_adaptive_episode(self.meta, self.model, env, task, self.ctrl_cfg, cfg.M,
                                          mode, self.rngs["planner"])
            if ep.truncated:
                log.warning("episode truncated after %d steps (environment fault)", len(ep))
            self.env_steps += len(ep)
            if len(ep):
                self.buffer.add_episode(*ep.arrays(), env={"config": env.base_config.tolist(),
                                                           "schedule": [[t, c.tolist()] for t, c in env.schedule]})

    def _holdout_errors(self, n_recent):
        """Mean one-step eval-slice loss before/after adaptation on the newest episodes."""
        cfg = self.cfg
        recent = ReplayBuffer()
        for ep in self.buffer.episodes[-n_recent:]:
            recent.add_episode(ep["S"], ep["A"], ep["S2"])
        if recent.n_positions(cfg.M, cfg.K) < 1:
            return float("nan"), float("nan")
        segs = recent.sample_segments(16, cfg.M, cfg.K, derive_rng(self.seed, f"holdout{self.iteration}"))
        pre_meta = MetaParams("mb", self.meta.theta, np.zeros(0))
        pre = meta_loss(pre_meta, self.model, segs)
        post = meta_loss(self.meta, self.model, segs) if self.variant != "mb" else pre
        return pre, post

    def train_round(self):
        cfg = self.cfg
        self.collect(self.iteration)
        if self.buffer.n_transitions >= 2:
            self.model = self.model.with_normalizer(fit_normalizer(self.buffer.arrays()))
        pre, post = self._holdout_errors(cfg.tasks_per_iter)
        losses = self.gradient_epochs()
        self.iteration += 1
        row = {"iteration": self.iteration, "meta_loss": losses[-1] if losses else float("nan"),
               "pre_update_eval_error": pre, "post_update_eval_error": post,
               "env_steps_collected": self.env_steps}
        self.log_rows.append(row)
        log.info("round %d: loss %.5f pre %.5f post %.5f steps %d", self.iteration,
                 row["meta_loss"], pre, post, self.env_steps)
        if self.out_dir is not None:
            self.save()
        return row

    def gradient_epochs(self, epochs=None):
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        losses = []
        positions = self.buffer.n_positions(cfg.M, cfg.K)
        if positions < 1:
            return losses
        steps = min(math.ceil(positions / cfg.batch_size), cfg.max_steps_per_epoch)
        for _ in range(epochs):
            epoch_losses = []
            for _ in range(steps):
                self.meta, rep = meta_train_step(self.meta, self.model, self.buffer,
                                                 _batch_cfg(cfg, positions), self.rngs["sampler"],
                                                 self.optimizer)
                epoch_losses.append(rep["meta_loss"])
            losses.append(float(np.mean(epoch_losses)))
        return losses

    def run(self, until: int | None = None):
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        while self.iteration < until:
            self.train_round()
        return self.meta

    # persistence -----------------------------------------------------------

    def _ckpt_path(self, iteration):
        return self.out_dir / "checkpoints" / f"iter_{iteration:04d}.ckpt"

    def save(self):
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        save_meta_checkpoint(self._ckpt_path(self.iteration), self.meta, self.model,
                             extra={"iteration": self.iteration, "config_hash": self.hash,
                                    "optimizer": {"kind": self.optimizer.kind, "t": self.optimizer.t}},
                             optimizer=self.optimizer)
        self.buffer.save(out / "buffer.ndjson")
        state = {"iteration": self.iteration, "env_steps": self.env_steps, "config_hash": self.hash,
                 "rngs": {k: rng_state(r) for k, r in self.rngs.items()}}
        with open(out / "state.json", "w") as fh:
            json.dump(state, fh, sort_keys=True)
        write_log_csv(out / "train_log.csv", self.log_rows)

    @classmethod
    def resume(cls, dist, cfg, ctrl_cfg, variant, seed, out_dir, split="train") -> "Trainer":
        tr = cls(dist, cfg, ctrl_cfg, variant, seed, out_dir, split)
        state_path = Path(out_dir) / "state.json"
        if not state_path.exists():
            return tr
        with open(state_path) as fh:
            state = json.load(fh)
        if state["config_hash"] != tr.hash:
            raise ArtifactError(f"resume mismatch: run directory was created with config hash "
                                f"{state['config_hash']}, current config hashes to {tr.hash}")
        header, blocks = load_checkpoint(tr._ckpt_path(state["iteration"]))
        tr.meta, tr.model = meta_from_checkpoint(header, blocks)
        tr.optimizer.load_blocks(blocks, header["optimizer"]["t"],
                                 {"theta": tr.meta.theta.shape, "psi": tr.meta.psi.shape})
        tr.buffer = ReplayBuffer.load(Path(out_dir) / "buffer.ndjson")
        tr.rngs = {k: restore_rng(v) for k, v in state["rngs"].items()}
        tr.iteration = state["iteration"]
        tr.env_steps = state["env_steps"]
        tr.log_rows = read_log_csv(Path(out_dir) / "train_log.csv")
        return tr


def _batch_cfg(cfg, positions):
    if positions >= cfg.batch_size:
        return cfg
    # early rounds may hold fewer legal positions than a full meta-batch
    from dataclasses import replace
    return replace(cfg, batch_size=positions)


def save_meta_checkpoint(path, meta: MetaParams, model: DynamicsModel, extra=None, optimizer=None):
    header = {"variant": meta.variant, "net": model.net.to_dict(),
              "model": {"state_dim": model.state_dim, "action_dim": model.action_dim,
                        "context_dim": model.context_dim, "ignore_dims": list(model.ignore_dims),
                        "variance": model.variance},
              "normalizer": model.normalizer.to_json(),
              "psi_shape": list(meta.psi.shape),
              "cell": meta.cell.to_dict() if meta.cell else None}
    header.update(extra or {})
    blocks = {"theta": meta.theta, "psi": np.atleast_1d(meta.psi) if meta.psi.ndim == 0 else meta.psi}
    if optimizer is not None:
        blocks.update(optimizer.blocks())
    save_checkpoint(path, blocks, header)


def meta_from_checkpoint(header, blocks):
    from .tensor import Mlp

    net = header["net"]
    m = header["model"]
    model = DynamicsModel(m["state_dim"], m["action_dim"],
                          Mlp(net["in_dim"], tuple(net["hidden_dims"]), net["out_dim"]),
                          Normalizer.from_json(header["normalizer"]), m["variance"],
                          m["context_dim"], tuple(m["ignore_dims"]))
    cell = None
    if header.get("cell"):
        c = header["cell"]
        cell = RecurrentCell(c["in_dim"], c["hidden_dim"], c["out_dim"])
    psi = blocks["psi"].reshape(header["psi_shape"])
    return MetaParams(header["variant"], blocks["theta"], psi, cell), model


def load_meta_checkpoint(path):
    return meta_from_checkpoint(*load_checkpoint(path))


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_log_csv(path, rows, columns=LOG_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_log_csv(path):
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"iteration": int(r["iteration"]), "meta_loss": float(r["meta_loss"]),
                    "pre_update_eval_error": float(r["pre_update_eval_error"]),
                    "post_update_eval_error": float(r["post_update_eval_error"]),
                    "env_steps_collected": int(r["env_steps_collected"])})
    return out


def meta_train(dist, cfg: TrainConfig, ctrl_cfg, variant="grbal", seed=0, out_dir=None,
               split="train") -> MetaParams:
    """Full aggregation/meta-gradient loop; returns the final (theta*, psi*)."""
    return Trainer(dist, cfg, ctrl_cfg, variant, seed, out_dir, split).run()
