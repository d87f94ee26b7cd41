"""Analytic environments with hidden, piecewise-constant dynamics configurations.

Every family integrates its equations of motion with semi-implicit Euler
(velocity first, then position) and optionally perturbs velocities with
Gaussian process noise. The configuration vector is never part of the
observation; ``probe()`` exposes it for tests only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError

log = logging.getLogger(__name__)

GRAVITY = 9.81


class EnvInstance:
    family = ""
    state_dim = 0
    action_dim = 0
    dt = 0.02
    substeps = 1
    # state dims that only carry absolute position; excluded from model inputs
    translation_dims: tuple[int, ...] = ()
    velocity_dims: tuple[int, ...] = ()

    def __init__(self, config, schedule=(), seed=0, noise_sigma=0.005, init_std=None,
                 horizon=200, extrapolated=False):
        self.base_config = np.asarray(config, dtype=np.float64)
        self.schedule = sorted((int(t), np.asarray(c, dtype=np.float64)) for t, c in schedule)
        self.seed = seed
        self.noise_sigma = float(noise_sigma)
        self.init_std = self.default_init_std if init_std is None else float(init_std)
        self.horizon = int(horizon)
        self.extrapolated = extrapolated
        self.rng = np.random.default_rng(seed)
        self.config = self.base_config.copy()
        self.state = None
        self.t = 0
        self.fault = False

    default_init_std = 0.05

    def nominal_state(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    def reset(self, seed=None) -> np.ndarray:
        """Draw s0; rewinds the switch schedule. Passing ``seed`` reseeds the stream."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.config = self.base_config.copy()
        self.t = 0
        self.fault = False
        s = self.nominal_state()
        if self.init_std > 0:
            s = s + self.init_noise_mask() * self.rng.normal(0.0, self.init_std, self.state_dim)
        self.state = self._sync(s)
        return self.state.copy()

    def init_noise_mask(self):
        return np.ones(self.state_dim)

    def _sync(self, s):
        """Recompute derived observation entries (e.g. end-effector position)."""
        return s

    def probe(self) -> np.ndarray:
        return self.config.copy()

    def _advance(self, s, a, config, h):
        raise NotImplementedError

    def _integrate(self, s, a, config):
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            s = self._advance(s, a, config, h)
        return s

    def reward(self, s, a, s_next):
        raise NotImplementedError

    def step(self, a):
        if self.state is None:
            raise ArgumentError("step() called before reset()")
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.action_dim,):
            raise ArgumentError(f"action must have shape ({self.action_dim},), got {a.shape}")
        if np.any(np.abs(a) > 1.0 + 1e-12):
            log.warning("action %s outside [-1, 1]; clipping", a)
            a = np.clip(a, -1.0, 1.0)
        s = self.state
        # non-finite results are reported through the fault flag below
        with np.errstate(over="ignore", invalid="ignore"):
            s_next = self._integrate(s, a, self.config)
        if self.noise_sigma > 0 and self.velocity_dims:
            idx = list(self.velocity_dims)
            s_next = s_next.copy()
            s_next[idx] += self.rng.normal(0.0, self.noise_sigma, len(idx))
        s_next = self._sync(s_next)
        self.t += 1
        for t_switch, cfg in self.schedule:
            if t_switch == self.t:
                self.config = cfg.copy()
        if not np.all(np.isfinite(s_next)):
            self.fault = True
            return s, 0.0, True
        r = float(self.reward(s[None], a[None], s_next[None])[0])
        self.state = s_next
        return s_next.copy(), r, self.t >= self.horizon


class PlanarHopper(EnvInstance):
    """Planar body with two thrusters.

    State (x, z, phi, vx, vz, omega). Thrust from both actuators pushes along
    the body axis; their difference twists the body against a torsional
    spring. Configuration = per-actuator strength; 0 means crippled.
    """

    family = "hopper"
    state_dim = 6
    action_dim = 2
    dt = 0.01
    translation_dims = (0,)
    velocity_dims = (3, 4, 5)

    thrust = 20.0
    drag = 8.0
    torque = 100.0
    k_phi = 50.0
    d_phi = 10.0
    k_z = 50.0
    d_z = 10.0

    def init_noise_mask(self):
        return np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0])

    def _advance(self, s, a, cfg, h):
        x, z, phi, vx, vz, om = s
        u = cfg * a
        push = self.thrust * (u[0] + u[1])
        ax = push * np.cos(phi) - self.drag * vx
        az = 0.5 * push * np.sin(phi) - self.k_z * z - self.d_z * vz
        aphi = self.torque * (u[0] - u[1]) - self.k_phi * phi - self.d_phi * om
        vx, vz, om = vx + h * ax, vz + h * az, om + h * aphi
        return np.array([x + h * vx, z + h * vz, phi + h * om, vx, vz, om])

    def reward(self, s, a, s_next):
        return (s_next[:, 0] - s[:, 0]) / self.dt - 0.05 * np.sum(a * a, axis=1) + 0.05


class SlopeCar(EnvInstance):
    """Point mass driving along piecewise-linear terrain.

    Integrates arc length and path speed; observes (x, z, vx, vz).
    Configuration = [slope_0..slope_{n-1}, drag_0..drag_{n-1}] for terrain
    pieces of width ``piece_width`` starting at x = 0; the outer pieces
    extend indefinitely.
    """

    family = "slopecar"
    state_dim = 4
    action_dim = 1
    dt = 0.02
    substeps = 4
    translation_dims = (0, 1)
    velocity_dims = ()
    piece_width = 1.5
    force = 5.0

    def __init__(self, config, *args, **kwargs):
        super().__init__(config, *args, **kwargs)
        self.n_pieces = self.base_config.size // 2
        self._path = None
        self.path_pos = 0.0
        self.path_vel = 0.0

    def _geometry(self, cfg):
        slopes = cfg[: self.n_pieces]
        xb = self.piece_width * np.arange(self.n_pieces + 1)
        zb = np.concatenate([[0.0], np.cumsum(self.piece_width * np.tan(slopes))])
        pb = np.concatenate([[0.0], np.cumsum(self.piece_width / np.cos(slopes))])
        return slopes, xb, zb, pb

    def _locate(self, p, cfg):
        slopes, xb, zb, pb = self._geometry(cfg)
        i = int(np.clip(np.searchsorted(pb, p, side="right") - 1, 0, self.n_pieces - 1))
        alpha = slopes[i]
        dp = p - pb[i]
        return i, alpha, xb[i] + dp * np.cos(alpha), zb[i] + dp * np.sin(alpha)

    def _observe(self, p, v, cfg):
        _, alpha, x, z = self._locate(p, cfg)
        return np.array([x, z, v * np.cos(alpha), v * np.sin(alpha)])

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.config = self.base_config.copy()
        self.t = 0
        self.fault = False
        self.path_pos = 0.0
        self.path_vel = 0.0
        if self.init_std > 0:
            self.path_pos = float(self.rng.normal(0.0, self.init_std))
            self.path_vel = float(self.rng.normal(0.0, self.init_std))
        self.state = self._observe(self.path_pos, self.path_vel, self.config)
        return self.state.copy()

    def energy(self) -> float:
        """Kinetic plus potential energy per unit mass."""
        _, _, _, z = self._locate(self.path_pos, self.config)
        return 0.5 * self.path_vel ** 2 + GRAVITY * z

    def step(self, a):
        if self.state is None:
            raise ArgumentError("step() called before reset()")
        a = np.asarray(a, dtype=np.float64).reshape(self.action_dim)
        if np.any(np.abs(a) > 1.0 + 1e-12):
            log.warning("action %s outside [-1, 1]; clipping", a)
            a = np.clip(a, -1.0, 1.0)
        s = self.state
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            i, alpha, _, _ = self._locate(self.path_pos, self.config)
            drag = self.config[self.n_pieces + i]
            acc = self.force * a[0] - GRAVITY * np.sin(alpha) - drag * self.path_vel
            self.path_vel += h * acc
            self.path_pos += h * self.path_vel
        if self.noise_sigma > 0:
            self.path_vel += self.rng.normal(0.0, self.noise_sigma)
        s_next = self._observe(self.path_pos, self.path_vel, self.config)
        self.t += 1
        for t_switch, cfg in self.schedule:
            if t_switch == self.t:
                self.config = cfg.copy()
        if not np.all(np.isfinite(s_next)):
            self.fault = True
            return s, 0.0, True
        r = float(self.reward(s[None], a[None], s_next[None])[0])
        self.state = s_next
        return s_next.copy(), r, self.t >= self.horizon

    def reward(self, s, a, s_next):
        return (s_next[:, 0] - s[:, 0]) / self.dt - 0.05 * np.sum(a * a, axis=1)


class Reacher2Link(EnvInstance):
    """Planar two-link arm with point masses at the link ends.

    State (q1, q2, dq1, dq2, ee_x, ee_y). Configuration = constant external
    force (fx, fy) applied at the end effector.
    """

    family = "reacher"
    state_dim = 6
    action_dim = 2
    dt = 0.02
    # semi-implicit Euler is first order; 128 substeps keep one step within
    # 1e-3 relative of a fine RK4 solution even with the arm near-folded
    substeps = 128
    velocity_dims = (2, 3)
    l1 = 0.5
    l2 = 0.5
    m1 = 1.0
    m2 = 1.0
    max_torque = 6.0
    damping = 1.0
    goal = np.array([0.3, 0.6])

    def nominal_state(self):
        return self._sync(np.array([0.3, 0.9, 0.0, 0.0, 0.0, 0.0]))

    def init_noise_mask(self):
        return np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])

    def end_effector(self, q1, q2):
        return (self.l1 * np.cos(q1) + self.l2 * np.cos(q1 + q2),
                self.l1 * np.sin(q1) + self.l2 * np.sin(q1 + q2))

    def _sync(self, s):
        s = np.array(s, dtype=np.float64)
        s[4], s[5] = self.end_effector(s[0], s[1])
        return s

    def accelerations(self, q, dq, a, cfg):
        """Joint accelerations from M(q) ddq = tau + J^T f - damping dq - bias(q, dq)."""
        l1, l2, m1, m2 = self.l1, self.l2, self.m1, self.m2
        q1, q2, w1, w2 = float(q[0]), float(q[1]), float(dq[0]), float(dq[1])
        c2, s2 = math.cos(q2), math.sin(q2)
        s1, c1 = math.sin(q1), math.cos(q1)
        s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
        m00 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2 * m2 * l1 * l2 * c2
        m01 = m2 * l2 * l2 + m2 * l1 * l2 * c2
        m11 = m2 * l2 * l2
        hc = m2 * l1 * l2 * s2
        fx, fy = float(cfg[0]), float(cfg[1])
        r0 = (self.max_torque * a[0] + (-l1 * s1 - l2 * s12) * fx + (l1 * c1 + l2 * c12) * fy
              - self.damping * w1 + hc * (2 * w1 * w2 + w2 * w2))
        r1 = self.max_torque * a[1] - l2 * s12 * fx + l2 * c12 * fy - self.damping * w2 - hc * w1 * w1
        det = m00 * m11 - m01 * m01
        return np.array([(m11 * r0 - m01 * r1) / det, (m00 * r1 - m01 * r0) / det])

    def _advance(self, s, a, cfg, h):
        acc = self.accelerations(s[:2], s[2:4], a, cfg)
        w1, w2 = s[2] + h * acc[0], s[3] + h * acc[1]
        return np.array([s[0] + h * w1, s[1] + h * w2, w1, w2, s[4], s[5]])

    def _integrate(self, s, a, cfg):
        # same update as repeated _advance, on Python floats for speed
        h = self.dt / self.substeps
        q = [float(s[0]), float(s[1])]
        w = [float(s[2]), float(s[3])]
        a = [float(a[0]), float(a[1])]
        for _ in range(self.substeps):
            acc = self.accelerations(q, w, a, cfg)
            w = [w[0] + h * acc[0], w[1] + h * acc[1]]
            q = [q[0] + h * w[0], q[1] + h * w[1]]
        return np.array([q[0], q[1], w[0], w[1], s[4], s[5]])

    def reward(self, s, a, s_next):
        d = s_next[:, 4:6] - self.goal
        return -np.sum(d * d, axis=1)


class PayloadCart(EnvInstance):
    """1-D cart pulling a payload; track a target speed.

    State (x, v). Configuration = (payload mass, drag coefficient).
    """

    family = "payload"
    state_dim = 2
    action_dim = 1
    dt = 0.02
    translation_dims = (0,)
    velocity_dims = (1,)
    force = 10.0
    base_mass = 1.0
    target_speed = 1.0

    def _advance(self, s, a, cfg, h):
        x, v = s
        mass = self.base_mass + cfg[0]
        v = v + h * (self.force * a[0] - cfg[1] * v) / mass
        return np.array([x + h * v, v])

    def reward(self, s, a, s_next):
        return -(s_next[:, 1] - self.target_speed) ** 2 - 0.01 * np.sum(a * a, axis=1)


FAMILIES = {cls.family: cls for cls in (PlanarHopper, SlopeCar, Reacher2Link, PayloadCart)}


def family_class(name: str):
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown environment family {name!r}; choose from {sorted(FAMILIES)}")


def _uniform(rng, bounds, what):
    lo, hi = (float(bounds[0]), float(bounds[1]))
    if hi < lo:
        raise ConfigError(f"empty range for {what}: [{lo}, {hi}]")
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _inside(value, bounds):
    return bounds[0] - 1e-12 <= value <= bounds[1] + 1e-12


@dataclass
class EnvDistribution:
    """Distribution over hidden configurations for one family.

    ``train`` and ``test`` hold family-specific range parameters:

    hopper:   crippled (list of actuator indices, -1 = none), strength [lo, hi]
    slopecar: slope [lo, hi] (radians, sign drawn uniformly when ``both_signs``),
              drag [lo, hi], pieces (int)
    reacher:  force [lo, hi] magnitude, angle (radians, or None for uniform)
    payload:  payload [lo, hi], drag [lo, hi]

    ``fixed`` (a full configuration vector) overrides the family ranges.
    Optional ``switch_at`` in a split re-samples the configuration at that
    timestep (mid-rollout change); ``switch_prob`` makes it random, and
    ``switch_to`` (a list of configuration vectors) fixes the candidates.
    """

    family: str
    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    noise_sigma: float = 0.005
    horizon: int = 200
    init_std: float | None = None

    def __post_init__(self):
        family_class(self.family)

    def _params(self, split):
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        defaults = DEFAULT_RANGES[self.family]
        params = dict(defaults)
        params.update(self.train)
        if split == "test":
            params.update(self.test)
        return params

    def sample_config(self, rng, split="train", exclude=None):
        p = self._params(split)
        fam = self.family
        if p.get("fixed") is not None:
            return np.asarray(p["fixed"], dtype=np.float64).copy(), None
        if fam == "hopper":
            choices = list(p["crippled"])
            if exclude is not None and len(choices) > 1:
                choices = [c for c in choices if c != exclude] or choices
            if not choices:
                raise ConfigError("hopper: empty crippled-actuator choice list")
            idx = int(choices[int(rng.integers(len(choices)))])
            cfg = np.array([_uniform(rng, p["strength"], "strength") for _ in range(2)])
            if idx >= 0:
                cfg[idx] = 0.0
            return cfg, idx
        if fam == "slopecar":
            n = int(p["pieces"])
            slopes = np.array([_uniform(rng, p["slope"], "slope") for _ in range(n)])
            if p.get("both_signs", True):
                slopes *= np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
            drags = np.array([_uniform(rng, p["drag"], "drag") for _ in range(n)])
            return np.concatenate([slopes, drags]), None
        if fam == "reacher":
            mag = _uniform(rng, p["force"], "force")
            angle = p.get("angle")
            angle = float(rng.uniform(0, 2 * np.pi)) if angle is None else float(angle)
            return np.array([mag * np.cos(angle), mag * np.sin(angle)]), None
        if fam == "payload":
            return np.array([_uniform(rng, p["payload"], "payload"),
                             _uniform(rng, p["drag"], "drag")]), None
        raise ConfigError(f"no sampler for {fam}")

    def is_extrapolated(self, cfg) -> bool:
        """True when a configuration lies outside the training ranges."""
        p = self._params("train")
        fam = self.family
        if fam == "hopper":
            crippled = [i for i in range(2) if cfg[i] == 0.0]
            return any(i not in p["crippled"] for i in crippled) or any(
                not _inside(c, p["strength"]) for c in cfg if c != 0.0)
        if fam == "slopecar":
            n = cfg.size // 2
            return any(not _inside(abs(s), p["slope"]) for s in cfg[:n]) or any(
                not _inside(d, p["drag"]) for d in cfg[n:])
        if fam == "reacher":
            return not _inside(float(np.hypot(*cfg[:2])), p["force"])
        if fam == "payload":
            return not (_inside(cfg[0], p["payload"]) and _inside(cfg[1], p["drag"]))
        return False


DEFAULT_RANGES = {
    "hopper": {"crippled": [-1, 0, 1], "strength": [0.6, 1.0]},
    "slopecar": {"slope": [0.0, 0.1], "drag": [0.1, 0.5], "pieces": 6, "both_signs": True},
    "reacher": {"force": [0.0, 2.0], "angle": None},
    "payload": {"payload": [0.0, 2.0], "drag": [0.2, 1.0]},
}


def sample_env(dist: EnvDistribution, split: str, rng: np.random.Generator,
               horizon: int | None = None) -> EnvInstance:
    """Draw an environment instance, including any mid-rollout switch."""
    params = dist._params(split)
    cfg, tag = dist.sample_config(rng, split)
    schedule = []
    switch_at = params.get("switch_at")
    switch_prob = float(params.get("switch_prob", 1.0 if switch_at is not None else 0.0))
    horizon = dist.horizon if horizon is None else int(horizon)
    if switch_at is not None and rng.uniform() < switch_prob:
        t_switch = int(switch_at) if switch_at != "random" else int(rng.integers(1, horizon))
        if params.get("switch_to") is not None:
            options = params["switch_to"]
            cfg2 = np.asarray(options[int(rng.integers(len(options)))], dtype=np.float64)
        else:
            cfg2, _ = dist.sample_config(rng, split, exclude=tag)
        schedule.append((t_switch, cfg2))
    seed = int(rng.integers(2 ** 63 - 1))
    cls = family_class(dist.family)
    extrapolated = split == "test" and (
        dist.is_extrapolated(cfg) or any(dist.is_extrapolated(c) for _, c in schedule))
    return cls(cfg, schedule, seed=seed, noise_sigma=dist.noise_sigma, init_std=dist.init_std,
               horizon=horizon, extrapolated=extrapolated)


def reset(env: EnvInstance, seed=None) -> np.ndarray:
    return env.reset(seed)


def env_step(env: EnvInstance, a):
    return env.step(a)


def make_env(family: str, config, **kwargs) -> EnvInstance:
    return family_class(family)(config, **kwargs)
