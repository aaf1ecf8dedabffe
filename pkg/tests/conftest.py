from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from taxkd.taxonomy import RankedPath, build_tree


@st.composite
def lineages(draw, max_paths=12, max_depth=4, alphabet="abc"):
    """A list of lineages whose tree has at most ``max_paths`` leaves."""
    raw = draw(
        st.lists(
            st.lists(st.sampled_from(alphabet), min_size=1, max_size=max_depth),
            min_size=1,
            max_size=max_paths,
        )
    )
    return [RankedPath(tuple(f"r{d}_{c}" for d, c in enumerate(p))) for p in raw]


@st.composite
def trees(draw, max_paths=12, max_depth=4):
    return build_tree(draw(lineages(max_paths, max_depth)))


@st.composite
def tree_and_logits(draw, max_paths=12, max_depth=4, scale=10.0):
    tree = draw(trees(max_paths, max_depth))
    seed = draw(st.integers(0, 2**32 - 1))
    z = np.random.default_rng(seed).normal(0.0, draw(st.floats(0.01, scale)), size=tree.n_leaves)
    return tree, z


def brute_node_probs(tree, leaf_probs):
    """Marginals by walking each leaf up through parent pointers."""
    out = np.zeros(tree.n_nodes)
    for slot, leaf in enumerate(tree.leaf_nodes):
        u = int(leaf)
        while u is not None:
            out[u] += leaf_probs[slot]
            u = tree.nodes[u].parent
    return out


@pytest.fixture
def small_tree():
    # root -> {A -> {l1, l2}, B}; leaf slots: A/l1 = 0, A/l2 = 1, B = 2
    return build_tree(["A;l1", "A;l2", "B"])


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
