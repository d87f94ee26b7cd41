import os

import numpy as np
import pytest

from grbal.control import ControllerConfig
from grbal.envs import EnvDistribution
from grbal.harness import ArtifactStore, train_method
from grbal.meta import TrainConfig

# Desk-scale settings shared by the acceptance suite and the slow harness tests.
HOPPER = EnvDistribution("hopper", train={"switch_at": "random", "switch_prob": 0.5})
TRAIN = TrainConfig(iterations=6, tasks_per_iter=8)
CTRL = ControllerConfig()
EVAL_SEEDS = [0, 1, 2, 3, 4]

ACCEPTANCE_LINES: list[str] = []


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """Per-coordinate relative error with an absolute floor for near-zero entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def scalar_mlp_forward(net, theta, x):
    """Independent scalar-loop evaluation of a ReLU MLP."""
    layers = net.unpack(theta)
    h = [float(v) for v in x]
    for li, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[1]):
            z = float(b[j])
            for i in range(W.shape[0]):
                z += h[i] * float(W[i, j])
            out.append(z if li == len(layers) - 1 else max(z, 0.0))
        h = out
    return np.array(h)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains models (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def store(tmp_path_factory):
    """Trained artifacts shared across test modules; GRBAL_TEST_STORE keeps them between runs."""
    root = os.environ.get("GRBAL_TEST_STORE")
    return ArtifactStore(root if root else tmp_path_factory.mktemp("artifacts"))


@pytest.fixture(scope="session")
def hopper_artifacts(store):
    return {m: train_method(m, HOPPER, TRAIN, CTRL, 0, store) for m in ("grbal", "rebal", "mb")}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion; printed again in the terminal summary."""
    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
