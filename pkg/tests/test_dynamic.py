import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnprop.dynamic import (ConfidenceReport, DynamicConfig, Instances, LikelyProperty,
                             agg_feature_names, compute_agg_features, dyn_property_from_json, dynamic_analysis,
                             evaluate_confidence, fit_decision_tree, fit_regression, predicate_mask, relax,
                             tree_to_predicates)
from gnnprop.generators import gen_bf_dataset, gen_bfs_dataset
from gnnprop.gnn import EMPTY_MAX, build_bellman_ford_reference, build_bfs_reference
from gnnprop.graph import Dataset, Graph
from gnnprop.inference import AffineEq, ClassIs, StructProperty
from gnnprop.lp import Constraints
from gnnprop.matching import Structure, enumerate_subiso_matches
from gnnprop import jsonio
from helpers import naive_cart, naive_cart_predict, naive_fnn, random_gnn, random_graph, random_structure

S0 = Structure(2, ((0, 1, 0),), 1)
S1 = Structure(1, (), 0)


def test_single_node_features():
    # target with two visited in-neighbours: in = nothing, full = max of messages
    m = build_bfs_reference()
    g = Graph(np.array([[0.0], [1.0], [1.0]]), [(1, 0, 0), (2, 0, 0)], np.zeros((2, 0)))
    f = compute_agg_features(m, g, S1, (0,))
    names = agg_feature_names(m, S1)
    assert len(f) == len(names)
    vals = dict(zip(names, f))
    assert vals["n0.full.t0.m0"] == 1.0
    assert vals["n0.diff.t0.m0"] == vals["n0.full.t0.m0"] - vals["n0.in.t0.m0"]


def test_diff_zero_when_covered():
    m = build_bfs_reference()
    g = Graph(np.array([[1.0], [0.0]]), [(0, 1, 0)], np.zeros((1, 0)))
    f = compute_agg_features(m, g, S0, (0, 1))
    names = agg_feature_names(m, S0)
    diffs = [v for n, v in zip(names, f) if ".diff." in n]
    assert np.allclose(diffs, 0.0)


def _loop_agg(layer, g, host, in_rows):
    """Hand loop over edges for the in-structure and full aggregates of one host."""
    res = []
    for which in ("in", "full"):
        vec = []
        for t in range(layer.etypes):
            msgs = []
            for k, (s, d, et) in enumerate(g.edges.tolist()):
                if d == host and et == t and (which == "full" or k in in_rows):
                    msgs.append(naive_fnn(layer.msg[t], list(g.x[s]) + list(g.x[d]) + list(g.e[k])))
            if layer.self_loop and t == 0:
                msgs.append(naive_fnn(layer.msg[0], list(g.x[host]) * 2 + [0.0] * g.e.shape[1]))
            for q in range(layer.msg_dim):
                col = [mm[q] for mm in msgs]
                if not col:
                    vec.append(EMPTY_MAX if layer.agg == "max" else 0.0)
                else:
                    vec.append({"sum": sum(col), "mean": sum(col) / len(col) if col else 0, "max": max(col)}[layer.agg])
        res.append(np.array(vec))
    return res


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_agg_vs_loop(seed):
    rng = np.random.default_rng(seed)
    m = random_gnn(rng, max_layers=1, max_dim=3)
    layer = m.layers[0]
    g = random_graph(rng, 5, m.node_dim, m.edge_dim, layer.etypes, p=0.5)
    s = random_structure(rng, 3, layer.etypes)
    ms = enumerate_subiso_matches(g, s).matches
    if not ms:
        return
    mt = ms[int(rng.integers(0, len(ms)))]
    f = compute_agg_features(m, g, s, mt)
    w = layer.etypes * layer.msg_dim
    idx = g.edge_index
    for i in range(s.node_count):
        rows = {idx[(mt[a], mt[i], t)] for a, b, t in s.edges if b == i}
        x_in, x_full = _loop_agg(layer, g, mt[i], rows)
        blk = f[i * 3 * w:(i + 1) * 3 * w]
        scale = np.maximum(1.0, np.abs(x_full))
        assert np.all(np.abs(blk[:w] - x_in) <= 1e-9 * np.maximum(1.0, np.abs(x_in)))
        assert np.all(np.abs(blk[w:2 * w] - x_full) <= 1e-9 * scale)


def _tree_tuple(node):
    if node.is_leaf:
        return ("leaf", node.label)
    return ("split", node.feature, node.threshold, _tree_tuple(node.left), _tree_tuple(node.right))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_cart_vs_naive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 200))
    F = np.round(rng.normal(size=(n, int(rng.integers(1, 4)))), 1)
    y = (F[:, 0] + 0.5 * rng.normal(size=n)) > 0
    depth = int(rng.integers(1, 3))
    leaf = int(rng.integers(1, 6))
    t = fit_decision_tree(F, y, depth, leaf)
    ref = naive_cart(F, y, depth, leaf)
    assert _tree_tuple(t.root) == ref
    assert t.predict(F).tolist() == [naive_cart_predict(ref, r) for r in F]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_tree_predicates_route(seed):
    rng = np.random.default_rng(seed)
    F = np.round(rng.normal(size=(80, 3)), 1)
    y = (F[:, 1] > 0.2) ^ (F[:, 2] > 0.7)
    t = fit_decision_tree(F, y, 3, 3)
    preds = tree_to_predicates(t)
    hit = np.zeros(len(F), dtype=bool)
    for p in preds:
        m = predicate_mask(p, F)
        assert not (hit & m).any()  # paths are disjoint
        hit |= m
    assert hit.tolist() == t.predict(F).tolist()


def test_regression_recovers():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(200, 4))
    dev = F @ np.array([[1.0, -2.0, 0.0, 0.5]]).T + 3.0
    coef, icpt = fit_regression(F, dev)
    assert np.allclose(coef, [[1.0, -2.0, 0.0, 0.5]], atol=1e-6) and np.allclose(icpt, [3.0], atol=1e-6)


def _bfs_setup():
    m = build_bfs_reference()
    d = gen_bfs_dataset(0, 40)
    return m, d, Instances(m, d)


def test_no_dyna_when_perfect():
    m, d, inst = _bfs_setup()
    lp = LikelyProperty(S1, "state", Constraints.of([([-1.0], -0.5, True)], 1), ClassIs("state", 1, 1), 1)
    dp = dynamic_analysis(lp, m, inst)
    assert dp.dyna is None and dp.confidence.pa_prior == 1.0 and dp.confidence.pa_full == 1.0


def test_dyna_improves_unvisited():
    m, d, inst = _bfs_setup()
    lp = LikelyProperty(S1, "state", Constraints.of([([1.0], 0.5, False)], 1), ClassIs("state", 0, 1), 1)
    dp = dynamic_analysis(lp, m, inst)
    c = dp.confidence
    assert dp.dyna and c.pa_prior < 1.0 and c.pa_full == 1.0
    assert c.pa_full >= c.pa_prior and c.support_full <= c.support_prior
    assert abs(c.ir - (c.pa_full - c.pa_prior) / c.pa_prior) < 1e-12
    # JSON round trip keeps the evaluation
    back = dyn_property_from_json(json.loads(jsonio.dumps(dp.to_json())), m)
    c2 = evaluate_confidence(back, m, inst)
    assert c2.pa_full == c.pa_full and c2.support_full == c.support_full


def test_undefined_report():
    m, d, inst = _bfs_setup()
    never = Constraints.of([([1.0], -5.0, False)], 1)
    lp = LikelyProperty(S1, "state", never, ClassIs("state", 0, 1), 1)
    dp = dynamic_analysis(lp, m, inst)
    assert dp.confidence.undefined and dp.confidence.to_json()["pa_full"] is None


def test_regression_zero_deviation():
    # without in-edges the distance is unchanged, so d' = d holds exactly and no term is fitted
    m = build_bellman_ford_reference()
    rng = np.random.default_rng(0)
    graphs = tuple(Graph(np.stack([np.zeros(4), rng.uniform(0, 5, 4)], axis=1), np.zeros((0, 3), dtype=np.int64),
                         np.zeros((0, 1))) for _ in range(5))
    inst = Instances(m, Dataset(graphs, (2, 1)))
    W = np.array([[0.0, 1.0]])
    lp = LikelyProperty(S1, "distance", Constraints.empty(2), AffineEq("distance", W, np.zeros(1)), 1)
    dp = dynamic_analysis(lp, m, inst)
    assert dp.out_dyna is None and dp.confidence.pe_prior == 0.0 == dp.confidence.pe_full


def test_regression_term_reduces_error():
    m = build_bellman_ford_reference()
    inst = Instances(m, gen_bf_dataset(0, 20))
    # d' = d ignores relaxation through in-edges, so a dynamic term is needed
    W = np.array([[0.0, 1.0]])
    lp = LikelyProperty(S1, "distance", Constraints.empty(2), AffineEq("distance", W, np.zeros(1)), 1)
    dp = dynamic_analysis(lp, m, inst)
    c = dp.confidence
    assert c.pe_full <= c.pe_prior + 1e-15
    assert dp.out_dyna is not None


def test_relax_requires_verified():
    p = StructProperty(S1, "state", Constraints.empty(1), ClassIs("state", 0, 1), 1, False)
    with pytest.raises(ValueError):
        relax(p)


def test_confidence_json():
    r = ConfidenceReport("classification", 3, 0)
    assert r.undefined
    r2 = ConfidenceReport.from_json(r.to_json())
    assert r2.support_prior == 3 and np.isnan(r2.pa_full)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_dyna_never_lowers_pa(seed):
    rng = np.random.default_rng(seed)
    m, d, inst = _bfs_setup()
    s = [S1, S0][int(rng.integers(0, 2))]
    n = s.node_count
    c = rng.normal(size=n)
    lp = LikelyProperty(s, "state", Constraints.of([(c, float(rng.normal()), False)], n),
                        ClassIs("state", int(rng.integers(0, 2)), 1), 1)
    dp = dynamic_analysis(lp, m, inst, DynamicConfig(3, 2))
    r = dp.confidence
    if r.support_full and r.support_prior:
        assert r.pa_full >= r.pa_prior - 1e-12
