import numpy as np
import pytest
from hypothesis import strategies as st

from ontodg.ontology import build_hierarchy


def balanced_edges(H: int, b: int):
    """Edges of a complete ``b``-ary tree with ``H`` levels; leaves are ``L<i>``."""
    edges, prev = [], ["root"]
    for level in range(2, H + 1):
        cur = []
        for i, parent in enumerate(prev):
            for j in range(b):
                k = i * b + j
                cur.append(f"L{k}" if level == H else f"n{level}_{k}")
                edges.append((parent, cur[-1]))
        prev = cur
    return edges


def balanced(H: int = 3, b: int = 2):
    return build_hierarchy(balanced_edges(H, b))


@st.composite
def random_trees(draw, H_range=(3, 5), b_range=(2, 4)):
    """Uniform-depth trees with a random number of children per internal node."""
    H = draw(st.integers(*H_range))
    edges, prev, k = [], ["root"], 0
    for level in range(2, H + 1):
        cur = []
        for parent in prev:
            for _ in range(draw(st.integers(*b_range))):
                cur.append(f"v{k}")
                edges.append((parent, f"v{k}"))
                k += 1
        prev = cur
    return build_hierarchy(edges)


@pytest.fixture
def tree7():
    return balanced(3, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
