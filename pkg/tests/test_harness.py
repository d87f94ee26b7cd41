import numpy as np
import pytest
from conftest import CTRL, EVAL_SEEDS, HOPPER

from grbal.control import ControllerConfig
from grbal.dynamics import DynamicsModel, fit_normalizer, predict
from grbal.envs import EnvDistribution
from grbal.errors import ConfigError, DataError
from grbal.harness import (Artifact, ArtifactStore, EvalReport, as_mb_de, assert_budget_parity, compare,
                           env_signature, error_histogram, eval_suite, k_step_errors, scenario_envs,
                           sensitivity_sweep, train_method)
from grbal.meta import MetaParams, TrainConfig, init_meta

PAYLOAD = EnvDistribution("payload", horizon=30)
TINY = TrainConfig(M=4, K=4, batch_size=8, epochs=1, iterations=2, tasks_per_iter=2, horizon=30,
                   max_steps_per_epoch=3, hidden=(8,))
TINY_CTRL = ControllerConfig(n_candidates=16, horizon=4)


def self_generated(model, theta, rng, n=30):
    S = np.zeros((n, 2))
    A = rng.uniform(-1, 1, size=(n, 1))
    S2 = np.zeros((n, 2))
    s = np.array([0.0, 0.2])
    for t in range(n):
        S[t] = s
        S2[t] = predict(model, theta, s[None], A[t][None])[0]
        s = S2[t]
    return S, A, S2


def payload_meta(rng, variant="grbal"):
    model = DynamicsModel.build(2, 1, (8,), ignore_dims=(0,))
    model = model.with_normalizer(fit_normalizer((rng.normal(size=(10, 2)), rng.normal(size=(10, 1)),
                                                  rng.normal(size=(10, 2)))))
    return model, init_meta(model, variant, rng, inner_lr=0.05)


def test_error_histogram_zero_on_self_generated_data(rng):
    model, meta = payload_meta(rng)
    # damped weights keep the self-generated trajectory at realistic magnitudes
    meta = MetaParams("grbal", 0.2 * meta.theta, meta.psi)
    ep = self_generated(model, meta.theta, rng)
    assert np.abs(ep[0]).max() < 50
    h = error_histogram(meta, model, [ep], M=5, K=5)
    assert h["pre"].size == 30 - 5 - 5 + 1
    assert np.all(h["pre"] <= 1e-10) and np.all(h["post"] <= 1e-10)
    assert h["t"].tolist() == list(range(5, 26))
    assert h["trace_pre"].shape == (21, 5)


def test_error_histogram_psi_zero_pairs_identical(rng):
    model, meta = payload_meta(rng)
    zero = MetaParams("grbal", meta.theta, np.zeros_like(meta.theta))
    eps = [tuple(rng.normal(size=(20, d)) for d in (2, 1, 2))]
    h = error_histogram(zero, model, eps, M=4, K=3)
    assert np.array_equal(h["pre"], h["post"])


def test_k_step_error_scalar_oracle(rng):
    model, meta = payload_meta(rng)
    S, A, S2 = (rng.normal(size=(8, d)) for d in (2, 1, 2))
    err, trace = k_step_errors(model, meta.theta, S, A, S2, 2, 3)
    s = S[2]
    total = 0.0
    for k in range(3):
        s = predict(model, meta.theta, s, A[2 + k])
        total += sum(abs(s[i] - S2[2 + k, i]) / model.normalizer.s_std[i] for i in range(2))
    assert err == pytest.approx(total / 6, rel=1e-12)
    assert trace.shape == (3,)


def test_eval_suite_empty_seeds(rng):
    model, meta = payload_meta(rng)
    art = Artifact("grbal", meta, model, 0, 4, 4)
    rep = eval_suite(art, PAYLOAD, "standard", [], TINY_CTRL)
    assert rep.returns == [] and rep.pre_errors == []
    assert np.isnan(rep.mean_return)
    assert rep.summary()["n_segments"] == 0


def test_oracle_normalization_anchor():
    rep = EvalReport("mb-oracle", "hopper", "fast_adaptation", [0, 1], returns=[120.0, 80.0])
    rep.oracle_return = rep.mean_return
    assert rep.summary()["mean_normalized_return"] == 1.0
    neg = EvalReport("mb-oracle", "reacher", "heldout_force", [0, 1], returns=[-3.0, -5.0])
    neg.oracle_return = neg.mean_return
    assert neg.summary()["mean_normalized_return"] == 1.0


def test_budget_parity(rng):
    model, meta = payload_meta(rng)
    arts = [Artifact("grbal", meta, model, 100, 4, 4), Artifact("mb", meta, model, 100, 4, 4),
            Artifact("mb-oracle", meta, model, 400, 4, 4)]
    assert assert_budget_parity(arts) == 100
    with pytest.raises(DataError, match="budgets differ"):
        assert_budget_parity(arts + [Artifact("rebal", meta, model, 99, 4, 4)])


def test_scenarios_follow_their_definition():
    fa = scenario_envs(HOPPER, "fast_adaptation", 0, 100)
    assert [e.base_config.tolist() for e in fa] == [[1, 1], [1, 1]]
    assert [(t, c.tolist()) for e in fa for t, c in e.schedule] == [(50, [0, 1]), (50, [1, 0])]
    gen = scenario_envs(HOPPER, "generalization", 0, 100, {"heldout_actuator": 1})
    assert gen[0].base_config.tolist() == [1, 0] and gen[0].schedule == []
    rf = scenario_envs(EnvDistribution("reacher"), "heldout_force", 0, 100, {"force": 4.0, "angle": -np.pi / 2})
    assert np.allclose(rf[0].base_config, [0.0, -4.0], atol=1e-12)
    with pytest.raises(ConfigError):
        scenario_envs(PAYLOAD, "fast_adaptation", 0, 10)
    with pytest.raises(ConfigError):
        scenario_envs(PAYLOAD, "nope", 0, 10)


def test_artifact_store_round_trip_and_reports_are_byte_identical(tmp_path):
    store = ArtifactStore(tmp_path / "store")
    a = train_method("grbal", PAYLOAD, TINY, TINY_CTRL, 3, store)
    b = train_method("grbal", PAYLOAD, TINY, TINY_CTRL, 3, store)
    assert a.config_hash == b.config_hash
    assert np.array_equal(a.meta.theta, b.meta.theta) and np.array_equal(a.meta.psi, b.meta.psi)
    assert a.env_steps == b.env_steps == 2 * 2 * 30
    for i, art in enumerate((a, b)):
        eval_suite(art, PAYLOAD, "standard", [0, 1], TINY_CTRL).write(tmp_path / f"r{i}", stem="x")
    for name in ("x_returns.csv", "x_errors.csv", "x_summary.json"):
        assert (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes()


def test_cache_key_tracks_physics():
    sig = env_signature("hopper")
    assert sig["drag"] == 8.0 and sig["dt"] == 0.01
    with pytest.raises(ConfigError):
        train_method("ppo", PAYLOAD, TINY, TINY_CTRL)
    with pytest.raises(ConfigError):
        train_method("mb-oracle", PAYLOAD, TINY, TINY_CTRL)


def test_compare_writes_reports_with_parity(tmp_path):
    store = ArtifactStore(tmp_path / "store")
    reports, steps = compare(PAYLOAD, TINY, TINY_CTRL, ["grbal", "mb", "mb+de"], "standard", [0, 1],
                             store=store, de_lr=1e-3, out_dir=tmp_path / "out")
    assert steps == 120
    assert set(reports) == {"mb-oracle", "grbal", "mb", "mb+de"}
    assert reports["mb+de"].de_lr == 1e-3
    header = (tmp_path / "out" / "compare.csv").read_text().splitlines()[0]
    assert header == "method,mean_return,std_return,median_return,normalized_return,env_steps,de_lr"
    assert reports["mb-oracle"].summary()["mean_normalized_return"] == 1.0


def test_sensitivity_single_value_one_row(tmp_path):
    rows = sensitivity_sweep([4], PAYLOAD, TINY, TINY_CTRL, [0], scenario="standard",
                             store=ArtifactStore(tmp_path), out_csv=tmp_path / "s.csv")
    assert len(rows) == 1 and rows[0]["K"] == 4
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 2


@pytest.mark.slow
def test_mb_de_post_switch_error_not_worse_than_mb(hopper_artifacts):
    mb = hopper_artifacts["mb"]
    de = as_mb_de(mb, 1e-3)
    M = mb.M
    diffs = []
    for seed in EVAL_SEEDS:
        env = scenario_envs(HOPPER, "fast_adaptation", seed, HOPPER.horizon)[0]
        from grbal.harness import run_episode
        from grbal.seeding import derive_rng
        S, A, S2 = run_episode(mb, env, CTRL, derive_rng(seed, "planner/0")).arrays()
        t0 = HOPPER.horizon // 2
        h = error_histogram(de.meta, de.model, [(S[t0 - M:t0 + 20], A[t0 - M:t0 + 20], S2[t0 - M:t0 + 20])],
                            M, 1, variant="de", de_lr=de.de_lr)
        diffs.append(float(np.mean(h["post"] - h["pre"])))
    print(f"MB+DE minus MB one-step error after the switch, per seed: {np.round(diffs, 5).tolist()}")
    assert np.median(diffs) <= 0.0
