"""Baselines, evaluation scenarios and experiment drivers.

Methods compared here share the network architecture, the planner and the
data-aggregation schedule, so every trained method consumes the same number
of environment steps. The MB oracle is the exception: it trains on the test
configuration alone with four times the budget and only serves as the
anchor for normalized returns.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import ControllerConfig, TaskSpec, run_adaptive_episode
from .dynamics import DynamicsModel, rollout
from .envs import EnvDistribution, family_class, sample_env
from .errors import ArgumentError, ConfigError, DataError
from .meta import (MetaParams, TrainConfig, Trainer, adapt_for_planning, config_hash,
                   save_meta_checkpoint)
from .seeding import derive_rng

log = logging.getLogger(__name__)

METHODS = ("grbal", "rebal", "mb", "mb+de", "mb-oracle")
SCENARIOS = ("fast_adaptation", "generalization", "heldout_force", "standard")
DE_LR_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)


@dataclass
class Artifact:
    """A trained model ready for evaluation."""

    method: str
    meta: MetaParams
    model: DynamicsModel
    env_steps: int
    M: int
    K: int
    de_lr: float = 0.0
    log_rows: list = field(default_factory=list)
    config_hash: str = ""

    @property
    def adaptation(self) -> str:
        return {"grbal": "grbal", "rebal": "rebal", "mb": "none", "mb+de": "de",
                "mb-oracle": "none"}[self.method]


class ArtifactStore:
    """Trained artifacts cached on disk under their configuration hash."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.ckpt"

    def get(self, key: str, method: str):
        path = self.path(key)
        if not path.exists():
            return None
        from .tensor import load_checkpoint
        from .meta import meta_from_checkpoint

        header, blocks = load_checkpoint(path)
        meta, model = meta_from_checkpoint(header, blocks)
        return Artifact(method, meta, model, header["env_steps"], header["M"], header["K"],
                        header.get("de_lr", 0.0), header.get("log_rows", []), key)

    def put(self, key: str, art: Artifact):
        save_meta_checkpoint(self.path(key), art.meta, art.model,
                             extra={"env_steps": art.env_steps, "M": art.M, "K": art.K,
                                    "de_lr": art.de_lr, "method": art.method,
                                    "log_rows": art.log_rows, "config_hash": key})


def _train(dist, cfg, ctrl_cfg, variant, seed, split="train", out_dir=None):
    tr = Trainer(dist, cfg, ctrl_cfg, variant, seed, out_dir, split)
    tr.run()
    return tr


def train_method(method: str, dist: EnvDistribution, cfg: TrainConfig, ctrl_cfg: ControllerConfig,
                 seed: int = 0, store: ArtifactStore | None = None, out_dir=None,
                 oracle_config=None) -> Artifact:
    """Train (or load from ``store``) the artifact behind a method variant."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    variant = {"grbal": "grbal", "rebal": "rebal"}.get(method, "mb")
    if method == "mb-oracle":
        if oracle_config is None:
            raise ConfigError("mb-oracle needs the test configuration")
        dist = oracle_distribution(dist, oracle_config)
        cfg = replace(cfg, tasks_per_iter=4 * cfg.tasks_per_iter)
    key_src = {"method": "mb" if method == "mb+de" else method, "dist": asdict(dist),
               "physics": env_signature(dist.family), "cfg": asdict(cfg), "ctrl": asdict(ctrl_cfg),
               "seed": seed}
    key = config_hash(key_src)
    if store is not None:
        art = store.get(key, method)
        if art is not None:
            art.method = method
            return art
    tr = _train(dist, cfg, ctrl_cfg, variant, seed, out_dir=out_dir)
    art = Artifact(method, tr.meta, tr.model, tr.env_steps, cfg.M, cfg.K, 0.0,
                   tr.log_rows, key)
    if store is not None:
        store.put(key, art)
    return art


def env_signature(family: str) -> dict:
    """Physical constants of a family, so cached artifacts follow changes to the simulator."""
    cls = family_class(family)
    out = {}
    for k in sorted(dir(cls)):
        v = getattr(cls, k)
        if k.startswith("_") or callable(v):
            continue
        if isinstance(v, (int, float, str, tuple)) or isinstance(v, np.ndarray):
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def train_mb(dist, cfg: TrainConfig, ctrl_cfg: ControllerConfig, seed=0, store=None) -> np.ndarray:
    """Plain supervised model on the same aggregation schedule; returns theta."""
    return train_method("mb", dist, cfg, ctrl_cfg, seed, store).meta.theta


def oracle_distribution(dist: EnvDistribution, config) -> EnvDistribution:
    """Training distribution restricted to the test configuration(s).

    ``config`` is either a configuration vector or a dict of range
    parameters describing exactly the test episodes.
    """
    if isinstance(config, dict):
        return replace(dist, train=dict(config), test={})
    return replace(dist, train={"fixed": [float(c) for c in config]}, test={})


def as_mb_de(mb: Artifact, de_lr: float) -> Artifact:
    return replace(mb, method="mb+de", de_lr=float(de_lr))


def run_mb_de(theta, model, env, task, ctrl_cfg, M, de_lr, rng=None, record_params=False):
    """One SGD step from theta on the last M transitions at every timestep."""
    meta = MetaParams("mb", theta, np.zeros(0))
    return run_adaptive_episode(meta, model, env, task, ctrl_cfg, M, "de", rng, de_lr=de_lr,
                                record_params=record_params)


# scenarios -------------------------------------------------------------------


def scenario_envs(dist: EnvDistribution, scenario: str, seed: int, horizon: int, spec: dict | None = None):
    """Episode set of a scenario for one evaluation seed."""
    spec = dict(spec or {})
    rng = derive_rng(seed, f"scenario/{scenario}")
    fam = dist.family
    cls = family_class(fam)
    kw = dict(noise_sigma=dist.noise_sigma, init_std=dist.init_std, horizon=horizon)
    if scenario == "fast_adaptation":
        if fam != "hopper":
            raise ConfigError("fast_adaptation is defined for the hopper family")
        # normal operation, then one actuator crippled from T/2; both actuators per seed
        envs = []
        for idx in (0, 1):
            crippled = np.ones(2)
            crippled[idx] = 0.0
            envs.append(cls(np.ones(2), [(horizon // 2, crippled)], seed=int(rng.integers(2 ** 62)), **kw))
        return envs
    if scenario == "generalization":
        if fam != "hopper":
            raise ConfigError("generalization is defined for the hopper family")
        idx = int(spec.get("heldout_actuator", 1))
        c = np.ones(2)
        c[idx] = 0.0
        return [cls(c, [], seed=int(rng.integers(2 ** 62)), **kw)]
    if scenario == "heldout_force":
        if fam != "reacher":
            raise ConfigError("heldout_force is defined for the reacher family")
        mag = float(spec.get("force", 4.0))
        angle = float(spec.get("angle", -np.pi / 2))
        return [cls(np.array([mag * np.cos(angle), mag * np.sin(angle)]), [],
                    seed=int(rng.integers(2 ** 62)), **kw)]
    if scenario == "standard":
        return [sample_env(dist, "test", rng, horizon=horizon)]
    raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


@dataclass
class EvalReport:
    method: str
    family: str
    scenario: str
    seeds: list
    returns: list = field(default_factory=list)          # per seed (mean over the seed's episodes)
    episode_returns: list = field(default_factory=list)  # (seed, episode index, return)
    pre_errors: list = field(default_factory=list)
    post_errors: list = field(default_factory=list)
    env_steps: int = 0
    de_lr: float = 0.0
    oracle_return: float | None = None
    config_hash: str = ""

    def __post_init__(self):
        if len(self.pre_errors) != len(self.post_errors):
            raise ArgumentError("pre/post error arrays must align one-to-one")

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def std_return(self) -> float:
        return float(np.std(self.returns, ddof=1)) if len(self.returns) > 1 else 0.0

    @property
    def median_return(self) -> float:
        return float(np.median(self.returns)) if self.returns else float("nan")

    def normalized_returns(self):
        if self.oracle_return is None:
            return None
        return [r / self.oracle_return for r in self.returns]

    def summary(self) -> dict:
        pre, post = np.asarray(self.pre_errors), np.asarray(self.post_errors)
        out = {"method": self.method, "family": self.family, "scenario": self.scenario,
               "seeds": list(self.seeds), "mean_return": self.mean_return,
               "median_return": self.median_return, "std_return": self.std_return,
               "env_steps": self.env_steps, "de_lr": self.de_lr, "config_hash": self.config_hash,
               "n_segments": int(pre.size)}
        if pre.size:
            out.update({"median_pre_error": float(np.median(pre)),
                        "median_post_error": float(np.median(post)),
                        "frac_post_below_pre": float(np.mean(post < pre))})
        if self.oracle_return is not None:
            out["oracle_return"] = self.oracle_return
            out["mean_normalized_return"] = float(np.mean(self.normalized_returns())) if self.returns else float("nan")
        return out

    def write(self, out_dir, stem=None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.method}_{self.scenario}"
        with open(out / f"{stem}_returns.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "episode", "return"])
            for seed, i, r in self.episode_returns:
                w.writerow([seed, i, repr(float(r))])
        with open(out / f"{stem}_errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "pre_update_error", "post_update_error"])
            for i, (a, b) in enumerate(zip(self.pre_errors, self.post_errors)):
                w.writerow([i, repr(float(a)), repr(float(b))])
        with open(out / f"{stem}_summary.json", "w") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=1)


def run_episode(art: Artifact, env, ctrl_cfg, rng, record_params=False):
    task = TaskSpec.for_env(env)
    env.reset()
    return run_adaptive_episode(art.meta, art.model, env, task, ctrl_cfg, art.M, art.adaptation, rng,
                                de_lr=art.de_lr, record_params=record_params)


def eval_suite(art: Artifact, dist: EnvDistribution, scenario: str, seeds, ctrl_cfg: ControllerConfig,
               horizon: int | None = None, spec: dict | None = None, with_errors=True,
               oracle_return: float | None = None) -> EvalReport:
    """Run a scenario's episodes for every seed; collect returns and segment errors."""
    horizon = dist.horizon if horizon is None else horizon
    rep = EvalReport(art.method, dist.family, scenario, list(seeds), env_steps=art.env_steps,
                     de_lr=art.de_lr, oracle_return=oracle_return, config_hash=art.config_hash)
    episodes = []
    for seed in seeds:
        per_seed = []
        for i, env in enumerate(scenario_envs(dist, scenario, seed, horizon, spec)):
            ep = run_episode(art, env, ctrl_cfg, derive_rng(seed, f"planner/{i}"))
            per_seed.append(ep.total_return)
            rep.episode_returns.append((seed, i, ep.total_return))
            episodes.append(ep.arrays())
        rep.returns.append(float(np.mean(per_seed)))
    if with_errors and episodes and art.method in ("grbal", "rebal", "mb+de"):
        hist = error_histogram(art.meta, art.model, episodes, art.M, art.K,
                               variant=art.adaptation, de_lr=art.de_lr)
        rep.pre_errors = hist["pre"].tolist()
        rep.post_errors = hist["post"].tolist()
    return rep


def assert_budget_parity(artifacts) -> int:
    steps = {a.method: a.env_steps for a in artifacts if a.method != "mb-oracle"}
    if len(set(steps.values())) > 1:
        raise DataError(f"environment-step budgets differ across methods: {steps}")
    return next(iter(steps.values())) if steps else 0


def tune_de_lr(mb: Artifact, dist: EnvDistribution, ctrl_cfg, grid=DE_LR_GRID, seed=1000,
               horizon=None, scenario="standard", spec=None) -> float:
    """Pick the dynamic-evaluation rate with the best return on validation episodes."""
    horizon = dist.horizon if horizon is None else horizon
    best, best_ret = grid[0], -np.inf
    for lr in grid:
        art = as_mb_de(mb, lr)
        rets = []
        for i, env in enumerate(scenario_envs(dist, scenario, seed, horizon, spec)):
            rets.append(run_episode(art, env, ctrl_cfg, derive_rng(seed, f"de/{i}")).total_return)
        if np.mean(rets) > best_ret:
            best, best_ret = lr, float(np.mean(rets))
    return best


# prediction-error analysis ------------------------------------------------------


def k_step_errors(model, theta, S, A, S2, t, K, context=None):
    """Mean |predicted - true| / std over K open-loop steps and state dims."""
    pred = rollout(model, theta, S[t], A[t:t + K], context)[1:]
    true = S2[t:t + K]
    return float(np.mean(np.abs(pred - true) / model.normalizer.s_std)), np.abs(pred - true).mean(axis=1)


def error_histogram(meta: MetaParams, model: DynamicsModel, episodes, M: int, K: int,
                    variant: str | None = None, de_lr: float = 0.0):
    """Paired K-step normalized errors before (prior) and after adaptation.

    ``episodes`` holds (S, A, S_next) arrays. For every legal t, the post
    error uses parameters adapted on [t-M, t); the pre error uses the prior
    (zero context for the recurrent learner). Returns arrays ``pre``,
    ``post``, ``t`` and per-timestep traces.
    """
    variant = variant or meta.variant
    pre, post, ts, trace_pre, trace_post = [], [], [], [], []
    for S, A, S2 in episodes:
        n = len(S)
        for t in range(M, n - K + 1):
            window = (S[t - M:t], A[t - M:t], S2[t - M:t])
            theta_post, ctx, _ = adapt_for_planning(meta, model, window, variant, de_lr)
            ctx0 = np.zeros(model.context_dim) if model.context_dim else None
            e_pre, tr_pre = k_step_errors(model, meta.theta, S, A, S2, t, K, ctx0)
            e_post, tr_post = k_step_errors(model, theta_post, S, A, S2, t, K, ctx)
            pre.append(e_pre)
            post.append(e_post)
            ts.append(t)
            trace_pre.append(tr_pre)
            trace_post.append(tr_post)
    return {"pre": np.array(pre), "post": np.array(post), "t": np.array(ts, dtype=int),
            "trace_pre": np.array(trace_pre), "trace_post": np.array(trace_post)}


def collect_heldout_episodes(dist, n, seed, horizon=None, split="train"):
    """Random-action episodes from fresh environment draws, never seen in training."""
    from .control import run_random_episode

    rng = derive_rng(seed, "heldout")
    out = []
    for _ in range(n):
        env = sample_env(dist, split, rng, horizon=horizon)
        env.reset()
        ep = run_random_episode(env, rng, horizon)
        out.append(ep.arrays())
    return out


# experiment drivers ------------------------------------------------------------------


def write_rows(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in columns])


def sensitivity_sweep(values, dist, cfg: TrainConfig, ctrl_cfg: ControllerConfig, seeds,
                      scenario="fast_adaptation", train_seed=0, store=None, out_csv=None):
    """Train and evaluate GrBAL for each K = M; one row per value."""
    rows = []
    for v in values:
        c = replace(cfg, M=int(v), K=int(v))
        ctrl = replace(ctrl_cfg, horizon=min(ctrl_cfg.horizon, int(v)))
        art = train_method("grbal", dist, c, ctrl, train_seed, store)
        rep = eval_suite(art, dist, scenario, seeds, ctrl, with_errors=False)
        rows.append({"K": int(v), "M": int(v), "mean_return": rep.mean_return,
                     "std_return": rep.std_return, "env_steps": art.env_steps})
    if out_csv:
        write_rows(out_csv, rows, ["K", "M", "mean_return", "std_return", "env_steps"])
    return rows


def distribution_sweep(ranges, dist, cfg: TrainConfig, ctrl_cfg: ControllerConfig, seeds,
                       heldout_force=4.0, heldout_angle=-np.pi / 2, train_seed=0, store=None,
                       out_csv=None, method="grbal"):
    """Train on each force-magnitude range, test on one out-of-range constant force."""
    if dist.family != "reacher":
        raise ConfigError("distribution_sweep uses the reacher family")
    rows = []
    for lo, hi in ranges:
        d = replace(dist, train={**dist.train, "force": [float(lo), float(hi)]})
        art = train_method(method, d, cfg, ctrl_cfg, train_seed, store)
        spec = {"force": heldout_force, "angle": heldout_angle}
        rep = eval_suite(art, d, "heldout_force", seeds, ctrl_cfg, spec=spec, with_errors=True)
        s = rep.summary()
        rows.append({"train_lo": float(lo), "train_hi": float(hi),
                     "test_error": s.get("median_post_error", float("nan")),
                     "test_return": rep.median_return, "mean_return": rep.mean_return,
                     "env_steps": art.env_steps, "returns": list(rep.returns)})
    steps = {r["env_steps"] for r in rows}
    if len(steps) > 1:
        raise DataError(f"datapoint budgets differ across ranges: {sorted(steps)}")
    if out_csv:
        write_rows(out_csv, rows, ["train_lo", "train_hi", "test_error", "test_return",
                                   "mean_return", "env_steps"])
    return rows


def heldout_error_report(art: Artifact, dist: EnvDistribution, ctrl_cfg: ControllerConfig, n_episodes=4,
                         seed=777, horizon=None, split="train"):
    """Pre/post K-step errors on closed-loop episodes from fresh draws of the distribution."""
    horizon = dist.horizon if horizon is None else horizon
    rng = derive_rng(seed, "heldout/env")
    episodes = []
    for i in range(n_episodes):
        env = sample_env(dist, split, rng, horizon=horizon)
        episodes.append(run_episode(art, env, ctrl_cfg, derive_rng(seed, f"heldout/planner/{i}")).arrays())
    hist = error_histogram(art.meta, art.model, episodes, art.M, art.K, variant=art.adaptation,
                           de_lr=art.de_lr)
    return EvalReport(art.method, dist.family, "heldout", [seed], pre_errors=hist["pre"].tolist(),
                      post_errors=hist["post"].tolist(), env_steps=art.env_steps,
                      config_hash=art.config_hash)


def scenario_oracle_params(dist: EnvDistribution, scenario: str, horizon: int, spec: dict | None = None) -> dict:
    """Training ranges that reproduce exactly the configurations of a scenario."""
    spec = dict(spec or {})
    if scenario == "fast_adaptation":
        return {"fixed": [1.0, 1.0], "switch_at": horizon // 2, "switch_to": [[0.0, 1.0], [1.0, 0.0]]}
    if scenario == "generalization":
        c = [1.0, 1.0]
        c[int(spec.get("heldout_actuator", 1))] = 0.0
        return {"fixed": c}
    if scenario == "heldout_force":
        mag, angle = float(spec.get("force", 4.0)), float(spec.get("angle", -np.pi / 2))
        return {"fixed": [mag * np.cos(angle), mag * np.sin(angle)]}
    return {**dist.train, **dist.test}


def run_cells(fn, cells, workers=1):
    """Map ``fn`` over independent experiment cells; results keep cell order."""
    cells = list(cells)
    if workers <= 1 or len(cells) <= 1:
        return [fn(*c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        futures = [pool.submit(fn, *c) for c in cells]
        return [f.result() for f in futures]


def compare(dist, cfg: TrainConfig, ctrl_cfg: ControllerConfig, methods, scenario, seeds, train_seed=0,
            store=None, spec=None, de_lr=None, with_oracle=True, workers=1, out_dir=None):
    """Train every method on one budget, evaluate them on a scenario, normalize by the oracle."""
    base = []
    for m in methods:
        b = "mb" if m == "mb+de" else m
        if b not in base:
            base.append(b)
    horizon = dist.horizon
    oracle_cfg = scenario_oracle_params(dist, scenario, horizon, spec) if with_oracle else None
    cells = [(m, dist, cfg, ctrl_cfg, train_seed, store, None, None) for m in base]
    if with_oracle:
        cells.append(("mb-oracle", dist, cfg, ctrl_cfg, train_seed, store, None, oracle_cfg))
    trained = dict(zip([c[0] for c in cells], run_cells(train_method, cells, workers)))
    arts = []
    for m in methods:
        if m == "mb+de":
            lr = de_lr if de_lr is not None else tune_de_lr(trained["mb"], dist, ctrl_cfg, scenario=scenario,
                                                          spec=spec)
            arts.append(as_mb_de(trained["mb"], lr))
        else:
            arts.append(trained[m])
    steps = assert_budget_parity(arts)
    log.info("budget parity: %d environment steps per method", steps)
    oracle_return = None
    reports = {}
    if with_oracle:
        rep = eval_suite(trained["mb-oracle"], dist, scenario, seeds, ctrl_cfg, spec=spec, with_errors=False)
        rep.oracle_return = rep.mean_return
        oracle_return = rep.mean_return
        reports["mb-oracle"] = rep
    for art in arts:
        reports[art.method] = eval_suite(art, dist, scenario, seeds, ctrl_cfg, spec=spec,
                                         oracle_return=oracle_return)
    if out_dir is not None:
        write_compare(out_dir, reports, steps)
    return reports, steps


COMPARE_COLUMNS = ("method", "mean_return", "std_return", "median_return", "normalized_return",
                   "env_steps", "de_lr")


def write_compare(out_dir, reports, steps):
    out = Path(out_dir)
    rows = []
    for name, rep in reports.items():
        s = rep.summary()
        rows.append({"method": name, "mean_return": rep.mean_return, "std_return": rep.std_return,
                     "median_return": rep.median_return,
                     "normalized_return": s.get("mean_normalized_return", float("nan")),
                     "env_steps": rep.env_steps, "de_lr": float(rep.de_lr)})
        rep.write(out / "reports", stem=name.replace("+", "_"))
    write_rows(out / "compare.csv", rows, COMPARE_COLUMNS)
    with open(out / "summary.json", "w") as fh:
        json.dump({"budget_env_steps": steps, "methods": {k: r.summary() for k, r in reports.items()}},
                  fh, sort_keys=True, indent=1)
    return rows


def fig4(dist, cfg: TrainConfig, ctrl_cfg: ControllerConfig, methods=("grbal", "rebal"), train_seed=0,
         store=None, n_episodes=4, seed=777, workers=1, out_dir=None, bins=30):
    """Pre/post K-step error distributions on held-out closed-loop episodes."""
    cells = [(m, dist, cfg, ctrl_cfg, train_seed, store) for m in methods]
    arts = run_cells(train_method, cells, workers)
    reports = {a.method: heldout_error_report(a, dist, ctrl_cfg, n_episodes, seed) for a in arts}
    if out_dir is not None:
        out = Path(out_dir)
        for name, rep in reports.items():
            rep.write(out, stem=f"fig4_{name}")
            pre, post = np.asarray(rep.pre_errors), np.asarray(rep.post_errors)
            hi = float(max(pre.max(initial=0.0), post.max(initial=0.0))) or 1.0
            edges = np.linspace(0.0, hi, bins + 1)
            h_pre, _ = np.histogram(pre, edges)
            h_post, _ = np.histogram(post, edges)
            rows = [{"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "pre_count": int(h_pre[i]),
                     "post_count": int(h_post[i])} for i in range(bins)]
            write_rows(out / f"fig4_{name}_histogram.csv", rows, ["bin_lo", "bin_hi", "pre_count", "post_count"])
    return reports
