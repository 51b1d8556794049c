import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gist.graph import Graph, random_connected_graph

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_graph(n: int, seed: int, avg_degree: float = 3.0) -> Graph:
    return random_connected_graph(n, avg_degree, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def p2():
    return Graph.from_edges([(0, 1)])


@pytest.fixture
def p3():
    return Graph.from_edges([(0, 1), (1, 2)])


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    outcomes = {}
    for key in ("passed", "failed", "error", "xfailed", "skipped"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                outcomes[nodeid.split("::")[-1]] = "PASS" if key == "passed" else "FAIL" if key in ("failed", "error") else key.upper()
    if not outcomes:
        return
    results = getattr(module, "RESULTS", {})
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcomes):
        number = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {number:2d} {outcomes[name]}: {results.get(name, 'no measurement recorded')}")
