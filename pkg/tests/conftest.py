import sys

import numpy as np
import pytest

from alignahead.graph import Graph


def random_graph(rng, n=8, p=0.4, features=4, classes=3, multi_label=False, isolate=()):
    """Small random graph with random masks; ``isolate`` lists nodes left edgeless."""
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = [(i, j) for i, j in np.argwhere(upper) if i not in isolate and j not in isolate]
    x = rng.standard_normal((n, features))
    if multi_label:
        y = (rng.random((n, classes)) < 0.4).astype(int)
    else:
        y = rng.integers(0, classes, n)
        y[:classes] = np.arange(classes)
    perm = rng.permutation(n)
    cut = max(1, n // 2)
    masks = {"train": perm[:cut].tolist(), "val": perm[cut : cut + n // 4].tolist(), "test": perm[cut + n // 4 :].tolist()}
    return Graph.from_edges(n, edges, x, y, masks, warn_asymmetric=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
