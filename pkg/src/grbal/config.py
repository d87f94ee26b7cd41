"""Declarative run configuration: one TOML/JSON file plus dotted overrides.

Sections map onto the library types:

    [env]         EnvDistribution (family, train/test ranges, noise, horizon)
    [meta]        TrainConfig
    [controller]  ControllerConfig
    [run]         method, seeds, scenario, output directory
    [experiment]  sweep values for the experiment drivers

Conventional hyperparameter names map as: LR -> meta.outer_lr, Inner LR ->
meta.inner_lr, Epochs -> meta.epochs, K / M -> meta.K / meta.M, Batch Size
-> meta.batch_size, #Tasks/itr -> meta.tasks_per_iter, T -> meta.horizon
(#TS/itr is their product), n_A -> controller.n_candidates, H ->
controller.horizon.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .control import ControllerConfig
from .envs import FAMILIES, EnvDistribution
from .errors import ConfigError
from .harness import METHODS, SCENARIOS
from .meta import TrainConfig

# MPPI temperature is in reward units; the reacher's per-step reward is ~100x smaller
FAMILY_CONTROLLER_DEFAULTS = {"reacher": {"temperature": 0.05}}


@dataclass
class RunSection:
    method: str = "grbal"
    seed: int = 0
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    scenario: str = "fast_adaptation"
    heldout_actuator: int = 1
    de_lr: float | None = None   # None: tune on a validation environment
    out_dir: str = "runs/default"
    workers: int = 1


@dataclass
class ExperimentSection:
    sensitivity_values: list = field(default_factory=lambda: [8, 16, 32])
    distribution_ranges: list = field(default_factory=lambda: [[0.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
    heldout_force: float = 4.0
    heldout_angle: float = -math.pi / 2
    compare_methods: list = field(default_factory=lambda: ["grbal", "rebal", "mb", "mb+de"])
    heldout_episodes: int = 4


@dataclass
class RunConfig:
    env: EnvDistribution
    meta: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    run: RunSection = field(default_factory=RunSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self):
        self.meta.validate()
        self.controller.validate()
        if self.controller.horizon > self.meta.K:
            raise ConfigError(f"controller.horizon ({self.controller.horizon}) must be <= meta.K "
                              f"({self.meta.K})")
        if self.run.method not in METHODS:
            raise ConfigError(f"run.method must be one of {METHODS}, got {self.run.method!r}")
        if self.run.scenario not in SCENARIOS:
            raise ConfigError(f"run.scenario must be one of {SCENARIOS}, got {self.run.scenario!r}")
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        for m in self.experiment.compare_methods:
            if m not in METHODS:
                raise ConfigError(f"experiment.compare_methods: unknown method {m!r}")
        for r in self.experiment.distribution_ranges:
            if len(r) != 2 or r[0] > r[1] or r[0] < 0:
                raise ConfigError(f"experiment.distribution_ranges: bad range {r!r}")
        return self

    def to_dict(self) -> dict:
        out = {"env": asdict(self.env), "meta": asdict(self.meta),
               "controller": asdict(self.controller), "run": asdict(self.run),
               "experiment": asdict(self.experiment)}
        return _drop_none(out)

    def hash(self) -> str:
        from .meta import config_hash
        return config_hash(self.to_dict())


SECTIONS = {"env": EnvDistribution, "meta": TrainConfig, "controller": ControllerConfig,
            "run": RunSection, "experiment": ExperimentSection}


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_drop_none(v) for v in d]
    return d


def _coerce(path, value, annotation):
    """Check ``value`` against a field annotation; return the stored form."""
    ann = str(annotation).replace("typing.", "")
    kinds = [k.strip() for k in ann.split("|")]
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if "list" in kinds and isinstance(value, list):
        return [float(v) for v in value] if "float" in kinds else value
    head = kinds[0]
    if head == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if head == "int":
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if head == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if head == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if head.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return tuple(value)
    if head.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if head.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return value
    return value


def _build_section(name, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a table")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key} (valid: {', '.join(sorted(known))})")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(f"{name}.{key}", value, known[key].type)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    """Validated RunConfig; unknown sections or keys are rejected with their key path."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section {key!r} (valid: {', '.join(SECTIONS)})")
    env_data = dict(data.get("env", {}))
    family = env_data.get("family", "hopper")
    if family not in FAMILIES:
        raise ConfigError(f"env.family must be one of {sorted(FAMILIES)}, got {family!r}")
    env_data["family"] = family
    env = _build_section("env", EnvDistribution, env_data)
    meta = _build_section("meta", TrainConfig, data.get("meta", {}))
    ctrl_data = {**FAMILY_CONTROLLER_DEFAULTS.get(family, {}), **data.get("controller", {})}
    ctrl = _build_section("controller", ControllerConfig, ctrl_data)
    run = _build_section("run", RunSection, data.get("run", {}))
    exp = _build_section("experiment", ExperimentSection, data.get("experiment", {}))
    return RunConfig(env, meta, ctrl, run, exp).validate()


def parse_value(text: str):
    """TOML scalar/array syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key[.sub]=value`` assignments to a raw config dict."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        if len(keys) < 2:
            raise ConfigError(f"override {path!r} needs a section and a key")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a non-table")
        node[keys[-1]] = parse_value(text.strip())
    return data


def read_raw(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def load_config(path=None, overrides=()) -> RunConfig:
    raw = read_raw(path) if path is not None else {}
    return from_dict(apply_overrides(raw, overrides))


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_snapshot(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, run=replace(cfg.run, seed=int(seed)))
