"""Command-line entry point: train, eval, experiment, inspect.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data/argument,
5 artifact, 6 numeric. Relative output directories resolve under
$GRBAL_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .errors import ArtifactError, ConfigError, GrbalError
from .harness import (SCENARIOS, Artifact, ArtifactStore, as_mb_de, compare, distribution_sweep, eval_suite,
                      fig4, sensitivity_sweep, tune_de_lr)
from .meta import Trainer, load_meta_checkpoint
from .tensor import read_checkpoint_header

log = logging.getLogger("grbal")

EXPERIMENTS = ("fig4", "sensitivity", "distribution", "compare")
OUTPUT_ROOT_ENV = "GRBAL_OUTPUT_ROOT"


def resolve_out(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"run.workers={args.workers}")
    return config_mod.load_config(args.config, overrides)


def _variant(method):
    return {"grbal": "grbal", "rebal": "rebal"}.get(method, "mb")


def cmd_train(args):
    cfg = _load(args)
    out = resolve_out(args.out or cfg.run.out_dir)
    if cfg.run.method == "mb-oracle":
        raise ConfigError("train the oracle through `experiment compare`")
    variant = _variant(cfg.run.method)
    snapshot = out / "config.toml"
    if args.resume:
        if snapshot.exists():
            previous = config_mod.load_config(snapshot)
            if previous.to_dict() != cfg.to_dict():
                raise ArtifactError(f"resume mismatch: {snapshot} differs from the requested configuration "
                                    f"(hash {previous.hash()} vs {cfg.hash()})")
        tr = Trainer.resume(cfg.env, cfg.meta, cfg.controller, variant, cfg.run.seed, out)
    else:
        if (out / "state.json").exists():
            raise ArtifactError(f"{out} already holds a run; pass --resume or choose another --out")
        tr = Trainer(cfg.env, cfg.meta, cfg.controller, variant, cfg.run.seed, out)
    config_mod.save_snapshot(cfg, snapshot)
    until = cfg.meta.iterations if args.iterations is None else args.iterations
    tr.run(until)
    if tr.iteration == 0:
        tr.save()
    print(f"trained {cfg.run.method} for {tr.iteration} rounds ({tr.env_steps} env steps) -> {out}")
    return 0


def latest_checkpoint(run_dir: Path) -> Path:
    state = run_dir / "state.json"
    if not state.exists():
        raise ArtifactError(f"no training state in {run_dir}")
    with open(state) as fh:
        it = json.load(fh)["iteration"]
    path = run_dir / "checkpoints" / f"iter_{it:04d}.ckpt"
    if not path.exists():
        raise ArtifactError(f"missing checkpoint {path}")
    return path


def load_run(run_dir: Path, overrides=()):
    snapshot = run_dir / "config.toml"
    if not snapshot.exists():
        raise ArtifactError(f"no config snapshot in {run_dir}")
    cfg = config_mod.load_config(snapshot, overrides)
    meta, model = load_meta_checkpoint(latest_checkpoint(run_dir))
    with open(run_dir / "state.json") as fh:
        steps = json.load(fh)["env_steps"]
    art = Artifact(cfg.run.method if cfg.run.method != "mb+de" else "mb", meta, model, steps,
                   cfg.meta.M, cfg.meta.K, config_hash=cfg.hash())
    return cfg, art


def cmd_eval(args):
    run_dir = resolve_out(args.run_dir)
    overrides = list(args.set or [])
    if args.scenario:
        overrides.append(f'run.scenario="{args.scenario}"')
    cfg, art = load_run(run_dir, overrides)
    spec = {"heldout_actuator": cfg.run.heldout_actuator, "force": cfg.experiment.heldout_force,
            "angle": cfg.experiment.heldout_angle}
    if cfg.run.method == "mb+de":
        lr = cfg.run.de_lr
        if lr is None:
            lr = tune_de_lr(art, cfg.env, cfg.controller, scenario=cfg.run.scenario, spec=spec)
        art = as_mb_de(art, lr)
    seeds = args.seeds if args.seeds is not None else cfg.run.eval_seeds
    rep = eval_suite(art, cfg.env, cfg.run.scenario, seeds, cfg.controller, spec=spec)
    out = run_dir / "eval" / cfg.run.scenario
    rep.write(out, stem=art.method.replace("+", "_"))
    s = rep.summary()
    print(json.dumps(s, sort_keys=True, indent=1))
    return 0


def cmd_experiment(args):
    cfg = _load(args)
    out = resolve_out(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_snapshot(cfg, out / "config.toml")
    store = ArtifactStore(out / "artifacts")
    seeds = cfg.run.eval_seeds
    ex = cfg.experiment
    workers = cfg.run.workers
    if args.name == "fig4":
        reports = fig4(cfg.env, cfg.meta, cfg.controller, ("grbal", "rebal"), cfg.run.seed, store,
                       ex.heldout_episodes, workers=workers, out_dir=out)
        for name, rep in reports.items():
            s = rep.summary()
            print(f"{name}: {s['n_segments']} segments, median pre {s['median_pre_error']:.4f}, "
                  f"median post {s['median_post_error']:.4f}, post<pre on {100 * s['frac_post_below_pre']:.1f}%")
    elif args.name == "sensitivity":
        rows = sensitivity_sweep(ex.sensitivity_values, cfg.env, cfg.meta, cfg.controller, seeds,
                                 cfg.run.scenario, cfg.run.seed, store, out / "sensitivity.csv")
        for r in rows:
            print(f"K=M={r['K']}: mean return {r['mean_return']:.2f} +- {r['std_return']:.2f}")
    elif args.name == "distribution":
        rows = distribution_sweep([tuple(r) for r in ex.distribution_ranges], cfg.env, cfg.meta, cfg.controller,
                                  seeds, ex.heldout_force, ex.heldout_angle, cfg.run.seed, store,
                                  out / "distribution.csv")
        for r in rows:
            print(f"force range [{r['train_lo']}, {r['train_hi']}]: test error {r['test_error']:.4f}, "
                  f"median return {r['test_return']:.2f}")
    else:
        spec = {"heldout_actuator": cfg.run.heldout_actuator, "force": ex.heldout_force,
                "angle": ex.heldout_angle}
        reports, steps = compare(cfg.env, cfg.meta, cfg.controller, ex.compare_methods, cfg.run.scenario, seeds,
                                 cfg.run.seed, store, spec, cfg.run.de_lr, workers=workers, out_dir=out)
        print(f"budget parity: {steps} environment steps per method")
        for name, rep in reports.items():
            print(f"{name}: mean return {rep.mean_return:.2f} +- {rep.std_return:.2f}")
    print(f"wrote {out}")
    return 0


def cmd_inspect(args):
    path = resolve_out(args.path)
    if path.is_dir():
        path = latest_checkpoint(path)
    if not path.exists():
        raise ArtifactError(f"no such checkpoint: {path}")
    header = read_checkpoint_header(path)
    print(json.dumps(header, sort_keys=True, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grbal", description="Meta-learned dynamics models for online adaptation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. meta.K=16 (repeatable)")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--workers", type=int, help="parallel experiment cells")
        sp.add_argument("--out", help="output directory (overrides run.out_dir)")

    sp = sub.add_parser("train", help="meta-train a model with data aggregation")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue the run in --out")
    sp.add_argument("--iterations", type=int, help="stop after this many rounds (for staged runs)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run on a scenario")
    sp.add_argument("run_dir")
    sp.add_argument("--scenario", choices=SCENARIOS)
    sp.add_argument("--seeds", type=int, nargs="*")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("experiment", help="run an experiment bundle")
    sp.add_argument("name", choices=EXPERIMENTS)
    common(sp)
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("inspect", help="print checkpoint metadata")
    sp.add_argument("path", help="checkpoint file or run directory")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except GrbalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
