import os
from pathlib import Path

import numpy as np
import pytest

from hgwavenet.graph_data import Snapshot, synthetic_dynamic_graph

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def data_dir() -> Path | None:
    p = os.environ.get("HGWAVENET_DATA_DIR")
    return Path(p) if p else None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_graph():
    return synthetic_dynamic_graph(num_nodes=30, num_snapshots=6, split=4, seed=5)


def path_graph(n=3):
    return Snapshot(0, [(i, i + 1) for i in range(n - 1)], n)


def random_ball(rng, n, d, c, max_frac=0.99):
    """Points spread over the ball of curvature c, radius up to ``max_frac / sqrt(c)``."""
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0, max_frac, size=(n, 1)) / np.sqrt(c)
    return v * r
