import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnprop.gnn import build_bellman_ford_reference, build_bfs_reference, build_dfs_reference
from gnnprop.lowering import FeatureLayout, equivalence_check, lower
from gnnprop.matching import Structure
from gnnprop.nn import fnn_eval
from helpers import naive_forward, random_gnn, random_structure
from gnnprop.matching import structure_as_graph


def test_bfs_two_node():
    m = build_bfs_reference()
    s = Structure(2, ((0, 1, 0),), 1)
    lm = lower(m, s, "target")
    for a in (0.0, 1.0):
        for b in (0.0, 1.0):
            assert fnn_eval(lm.fnn, np.array([a, b])).tolist() == [max(a, b)]


def test_layout_order():
    s = Structure(2, ((0, 1, 0),), 1)
    lay = FeatureLayout(s, 2, 1)
    assert lay.input_dim == 5 and lay.names() == ["n0.x0", "n0.x1", "n1.x0", "n1.x1", "e0.w0"]


def test_bad_slice():
    with pytest.raises(ValueError):
        lower(build_bfs_reference(), Structure(1, (), 0), (0, 5))


@pytest.mark.parametrize("m", [build_bfs_reference(), build_bellman_ford_reference(), build_dfs_reference()])
def test_references_equivalent(m):
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = random_structure(rng, 4, m.layers[0].etypes)
        lm = lower(m, s)
        assert equivalence_check(m, s, lm, trials=30).passed


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_random_vs_naive(seed):
    rng = np.random.default_rng(seed)
    m = random_gnn(rng, max_layers=2, max_dim=4)
    s = random_structure(rng, 4, m.layers[0].etypes)
    lm = lower(m, s, "all")
    lay = lm.layout
    for _ in range(5):
        x = rng.normal(size=lay.input_dim)
        xs, es = lay.split(x)
        ref = naive_forward(m, structure_as_graph(s, xs, es)).reshape(-1)
        got = fnn_eval(lm.fnn, x)
        assert np.max(np.abs(got - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))
