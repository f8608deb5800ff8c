import numpy as np
import pytest
from hypothesis import strategies as st

from distvar.cli import bundled_scenario
from distvar.feeder import make_feeder
from distvar.scenario import load_config

FIG6_EDGES = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (3, 6), (6, 7)]


def random_tree(rng: np.random.Generator, n: int, homogeneous: bool = False, ratio: float = 2.75):
    """Random labelled tree on 0..n: node i hangs off a uniformly chosen earlier node."""
    edges = []
    for child in range(1, n + 1):
        parent = int(rng.integers(0, child))
        x = float(rng.uniform(0.05, 1.0))
        r = ratio * x if homogeneous else float(rng.uniform(0.05, 2.0))
        edges.append((parent, child, r, x))
    # shuffle node labels 1..n so parents are not always smaller
    perm = np.concatenate([[0], rng.permutation(np.arange(1, n + 1))])
    edges = [(int(perm[a]), int(perm[b]), r, x) for a, b, r, x in edges]
    return make_feeder(edges, node_count=n)


@st.composite
def trees(draw, max_nodes: int = 30, homogeneous: bool = False):
    n = draw(st.integers(1, max_nodes))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_tree(np.random.default_rng(seed), n, homogeneous)


def chain(n: int, r: float = 1.1, x: float = 0.4):
    return make_feeder([(i, i + 1, r, x) for i in range(n)])


@pytest.fixture(scope="session")
def fig6_cfg():
    return load_config(bundled_scenario("fig6_baseline"))


@pytest.fixture(scope="session")
def fig6_attack_cfg():
    return load_config(bundled_scenario("fig6_attack"))


@pytest.fixture(scope="session")
def fig6_baseline_trace(fig6_cfg):
    from distvar.agents import run_simulation

    return run_simulation(fig6_cfg)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
