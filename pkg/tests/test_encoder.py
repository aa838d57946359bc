import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medgraph import autodiff as ad
from medgraph import encoder as enc
from medgraph.cohort import BipartiteGraph, CodeNode, Visit


def params(rng, d_v=3, d_c=4, m=5, dim=2):
    return enc.init_encoder(rng, d_v, d_c, m, dim)


def nodes(p):
    return {k: ad.param(v, k) for k, v in p.items()}


def test_zero_weights_give_unit_gaussian():
    p = {k: np.zeros_like(v) for k, v in params(np.random.default_rng(0)).items()}
    z = enc.encode(np.array([1.0, -2.0, 3.0]), "visit", p)
    np.testing.assert_array_equal(z.mu, 0.0)
    np.testing.assert_array_equal(z.var, 1.0)


def test_variance_floor_far_negative():
    p = {k: np.zeros_like(v) for k, v in params(np.random.default_rng(0)).items()}
    p["b_sigma"] = np.array([-50.0, 0.0])
    z = enc.encode(np.zeros(3), "visit", p)
    assert z.var[0] > 0
    assert z.var[0] == pytest.approx(math.exp(-50), rel=1e-6)


def test_encode_matches_scalar_arithmetic(rng):
    p = params(rng)
    x = rng.normal(size=4)
    z = enc.encode(x, "code", p)
    W, Wm, Ws = p["W_c"].tolist(), p["W_mu"].tolist(), p["W_sigma"].tolist()
    u = [sum(x[i] * W[i][j] for i in range(4)) for j in range(5)]
    for k in range(2):
        mu = sum(u[j] * Wm[j][k] for j in range(5)) + p["b_mu"][k]
        pre = sum(u[j] * Ws[j][k] for j in range(5)) + p["b_sigma"][k]
        var = (pre if pre > 0 else math.exp(pre) - 1) + 1
        assert z.mu[k] == pytest.approx(mu, abs=1e-12)
        assert z.var[k] == pytest.approx(var, abs=1e-12)


def test_encode_dimension_mismatch(rng):
    with pytest.raises(ad.ShapeError):
        enc.encode(np.zeros(5), "visit", params(rng))


def test_variance_positive_over_many_encodes(rng):
    p = params(rng)
    p["W_sigma"] *= 20
    X = rng.normal(scale=5, size=(10_000, 3))
    mu, var = enc.encode_nodes(X, p["W_v"], {k: ad.const(v) for k, v in p.items()})
    assert (var.value > 0).all()


def G(mu, var):
    return enc.GaussianEmbedding(np.asarray(mu, float), np.asarray(var, float))


def test_w2_examples():
    a = G([0, 0], [1, 2])
    assert enc.w2_distance(a, a) == 0.0
    assert enc.w2_distance(a, G([3, 4], [1, 2])) == 5.0
    assert enc.w2_distance(G([0], [1]), G([0], [4])) == 1.0


def test_w2_metric_on_random_triples():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a, b, c = (G(rng.normal(size=4), rng.uniform(0.01, 3, size=4)) for _ in range(3))
        ab, bc, ac = enc.w2_distance(a, b), enc.w2_distance(b, c), enc.w2_distance(a, c)
        assert ab == enc.w2_distance(b, a)
        assert ab >= 0
        assert ac <= ab + bc + 1e-12


def test_edge_probability():
    a = G([0.0], [1.0])
    assert enc.edge_probability(a, a) == 0.5
    assert enc.edge_probability(a, G([math.log(3)], [1.0])) == pytest.approx(0.25, abs=1e-15)
    ps = [enc.edge_probability(a, G([d], [1.0])) for d in np.linspace(0, 40, 50)]
    assert all(x > y for x, y in zip(ps, ps[1:]))


def graph_with_degrees(degrees, n_visits=None):
    """Codes 0..n-1 with the given degrees, plus one probe visit linked to code ``n``."""
    n = len(degrees)
    codes = tuple(CodeNode(f"c{i}", i, np.zeros(1)) for i in range(n + 1))
    visits, edges = [], []
    for c, d in enumerate(degrees):
        for _ in range(d):
            visits.append(Visit(f"v{len(visits)}", len(visits), 0.0, np.zeros(1), (c,)))
            edges.append((visits[-1].index, c))
    probe = Visit("probe", len(visits), 0.0, np.zeros(1), (n,))
    visits.append(probe)
    edges.append((probe.index, n))
    return BipartiteGraph(tuple(visits), codes, np.array(edges)), probe.index


def test_negative_sampler_follows_three_quarter_power():
    g, probe = graph_with_degrees([81, 16, 1])
    sampler = enc.NegativeSampler(g)
    np.testing.assert_allclose(sampler.probabilities(probe)[:3], np.array([27, 8, 1]) / 36)
    draws = sampler.sample(np.random.default_rng(0), probe, 100_000)
    freq = np.bincount(draws, minlength=4)[:3] / draws.size
    assert np.abs(freq - np.array([27, 8, 1]) / 36).max() < 0.02


def test_negatives_exclude_linked_codes():
    codes = tuple(CodeNode(f"c{i}", i, np.zeros(1)) for i in range(4))
    v = Visit("v", 0, 0.0, np.zeros(1), (0, 1, 3))
    g = BipartiteGraph((v,), codes, np.array([(0, 0), (0, 1), (0, 3)]))
    # code 2 has zero degree, so the sampler falls back to uniform over unlinked codes
    out = enc.sample_negatives(np.random.default_rng(1), (0, 0), 25, g)
    assert (out == 2).all()
    a = enc.sample_negatives(np.random.default_rng(9), (0, 0), 5, g)
    b = enc.sample_negatives(np.random.default_rng(9), (0, 0), 5, g)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        enc.sample_negatives(np.random.default_rng(1), (0, 0), 0, g)
    full = Visit("v", 0, 0.0, np.zeros(1), (0, 1, 2, 3))
    g_full = BipartiteGraph((full,), codes, np.array([(0, c) for c in range(4)]))
    with pytest.raises(ValueError, match="every code"):
        enc.sample_negatives(np.random.default_rng(1), (0, 0), 1, g_full)
    batch = enc.NegativeSampler(g_full).sample_edges(np.random.default_rng(1), g_full.edges, 3)
    assert (batch == -1).all()


def test_structural_loss_single_edge_zero_distance():
    p = {k: ad.const(np.zeros_like(v)) for k, v in params(np.random.default_rng(0)).items()}
    loss = enc.structural_loss(np.array([[0, 0]]), np.zeros((1, 0)), p,
                               np.zeros((1, 3)), np.zeros((1, 4)))
    assert loss.value == pytest.approx(math.log(2), abs=1e-15)


def scalar_struct_loss(edges, negatives, p, Xv, Xc):
    def emb(x, W):
        x, W = list(x), W.tolist()
        u = [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]
        mu, sd = [], []
        for k in range(p["W_mu"].shape[1]):
            mu.append(sum(u[j] * p["W_mu"][j, k] for j in range(len(u))) + p["b_mu"][k])
            pre = sum(u[j] * p["W_sigma"][j, k] for j in range(len(u))) + p["b_sigma"][k]
            sd.append(math.sqrt((pre if pre > 0 else math.expm1(pre)) + 1))
        return mu, sd

    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a[0] + a[1], b[0] + b[1])))

    def log_sig(z):
        return -math.log1p(math.exp(-z))

    total = 0.0
    for (v, c), negs in zip(edges, negatives):
        ev = emb(Xv[v], p["W_v"])
        total += log_sig(-dist(ev, emb(Xc[c], p["W_c"])))
        for n in negs:
            if n < 0:
                continue
            total += log_sig(dist(ev, emb(Xc[n], p["W_c"])))
    return -total / len(edges)


def test_structural_loss_matches_scalar_oracle(rng):
    p = params(rng)
    Xv, Xc = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    edges = np.array([[0, 0], [1, 1], [0, 1]])
    negatives = np.array([[1, 1], [0, -1], [0, 1]])
    got = enc.structural_loss(edges, negatives, {k: ad.const(v) for k, v in p.items()}, Xv, Xc)
    assert got.value == pytest.approx(scalar_struct_loss(edges, negatives, p, Xv, Xc),
                                      abs=1e-12)


def test_structural_loss_gradient(rng):
    p = params(rng)
    Xv, Xc = rng.normal(size=(3, 3)), rng.normal(size=(4, 4))
    edges = np.array([[0, 0], [1, 2], [2, 3]])
    negatives = np.array([[1, 2], [0, 3], [1, 1]])
    rep = ad.grad_check(lambda q: enc.structural_loss(edges, negatives, q, Xv, Xc), p)
    assert rep.passed, rep


def test_gradient_step_pulls_positive_pair_together():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = params(rng)
        xv, xc = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))

        def dist(q):
            a = enc.encode(xv[0], "visit", q)
            b = enc.encode(xc[0], "code", q)
            return enc.w2_distance(a, b)

        leaves = nodes(p)
        ad.backward(enc.structural_loss(np.array([[0, 0]]), np.zeros((1, 0)), leaves, xv, xc))
        stepped = {k: p[k] - 1e-4 * leaves[k].grad for k in p}
        assert dist(stepped) < dist(p)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 30), st.floats(0, 30))
def test_edge_probability_monotone(d1, d2):
    a = G([0.0], [1.0])
    p1, p2 = enc.edge_probability(a, G([d1], [1.0])), enc.edge_probability(a, G([d2], [1.0]))
    if d1 < d2:
        assert p1 >= p2
        if d2 - d1 > 1e-6:
            assert p1 > p2
