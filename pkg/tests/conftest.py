import sys

import numpy as np
import pytest

from chbc.hierarchy import build_hierarchy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_tree():
    """Two superclasses: ``a`` with children {0, 1}, ``b`` with child {2}."""
    return build_hierarchy([2, 3], [[0, 0, 1]])


@pytest.fixture
def three_level_tree():
    # level 1: 2 nodes; level 2: 3 nodes; level 3: 6 nodes
    return build_hierarchy([2, 3, 6], [[0, 0, 1], [0, 0, 1, 2, 2, 2]])


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
