"""Gaussian node encoders and the visit-code structural objective.

Weights are stored input-major (``W_v`` is ``D_v x m``, ``W_mu`` is ``m x L``)
and applied to row vectors, so ``mu = (x @ W_v) @ W_mu + b_mu``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .cohort import BipartiteGraph

ENCODER_KEYS = ("W_v", "W_c", "W_mu", "b_mu", "W_sigma", "b_sigma")


@dataclass(frozen=True)
class GaussianEmbedding:
    mu: np.ndarray
    var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder(rng: np.random.Generator, d_v: int, d_c: int, m: int, dim: int) -> dict:
    return {
        "W_v": glorot(rng, d_v, m),
        "W_c": glorot(rng, d_c, m),
        "W_mu": glorot(rng, m, dim),
        "b_mu": np.zeros(dim),
        "W_sigma": glorot(rng, m, dim),
        "b_sigma": np.zeros(dim),
    }


def _elu_plus_one(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def encode(attrs, kind: str, p: Mapping[str, np.ndarray]) -> GaussianEmbedding:
    """Encode one attribute vector (``kind`` is ``"visit"`` or ``"code"``)."""
    W = p[{"visit": "W_v", "code": "W_c"}[kind]]
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.shape != (W.shape[0],):
        raise ad.ShapeError(f"{kind} attributes have shape {attrs.shape}, expected ({W.shape[0]},)")
    u = attrs @ W
    return GaussianEmbedding(u @ p["W_mu"] + p["b_mu"],
                             _elu_plus_one(u @ p["W_sigma"] + p["b_sigma"]))


def encode_nodes(X, W, p: Mapping[str, ad.Node]) -> tuple[ad.Node, ad.Node]:
    """Batched encoder on the tape: rows of ``X`` -> (mu, var) nodes."""
    u = ad.matmul(X, W)
    mu = ad.matmul(u, p["W_mu"]) + p["b_mu"]
    var = ad.elu_plus_one(ad.matmul(u, p["W_sigma"]) + p["b_sigma"])
    return mu, var


def w2_distance(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """2-Wasserstein distance between diagonal Gaussians."""
    if a.mu.shape != b.mu.shape:
        raise ad.ShapeError(f"embedding sizes differ: {a.mu.shape} vs {b.mu.shape}")
    dm = a.mu - b.mu
    ds = a.std - b.std
    return float(np.sqrt(dm @ dm + ds @ ds))


def w2_distance_nodes(mu_a, var_a, mu_b, var_b) -> ad.Node:
    """Row-wise W2 distance on the tape; rows may broadcast."""
    dm = mu_a - mu_b
    ds = ad.sqrt(var_a) - ad.sqrt(var_b)
    return ad.sqrt(ad.sum(ad.square(dm), axis=-1) + ad.sum(ad.square(ds), axis=-1))


def _w2_rows(fa: ad.Node, ia, fb: ad.Node, ib) -> ad.Node:
    """W2 distances between rows ``fa[ia]`` and ``fb[ib]`` of [mu, std] features."""
    diff = ad.take(fa, ia) - ad.take(fb, ib)
    return ad.sqrt(ad.sum(ad.square(diff), axis=-1))


def edge_probability(v: GaussianEmbedding, c: GaussianEmbedding) -> float:
    d = w2_distance(v, c)
    return float(1.0 / (1.0 + np.exp(d)))


class NegativeSampler:
    """Draws codes not linked to a visit, with probability proportional to
    code degree raised to ``power``."""

    def __init__(self, graph: BipartiteGraph, power: float = 0.75):
        self.n_codes = len(graph.codes)
        if self.n_codes < 2:
            raise ValueError("negative sampling needs at least two codes")
        self.weights = graph.code_degree.astype(np.float64) ** power
        self.visit_codes = [np.asarray(v.codes, dtype=np.intp) for v in graph.visits]

    def probabilities(self, visit: int) -> np.ndarray:
        w = self.weights.copy()
        w[self.visit_codes[visit]] = 0.0
        total = w.sum()
        if total <= 0:
            # every unlinked code has zero degree; fall back to uniform
            w = np.ones(self.n_codes)
            w[self.visit_codes[visit]] = 0.0
            total = w.sum()
            if total <= 0:
                raise ValueError(f"visit {visit} is linked to every code")
        return w / total

    def sample(self, rng: np.random.Generator, visit: int, size) -> np.ndarray:
        return rng.choice(self.n_codes, size=size, p=self.probabilities(visit))

    def sample_edges(self, rng: np.random.Generator, edges: np.ndarray, k: int) -> np.ndarray:
        """K negatives per positive edge, shape ``(len(edges), k)``.

        Rows of a visit linked to every code are filled with -1 (no negative).
        """
        out = np.full((len(edges), k), -1, dtype=np.intp)
        visits = edges[:, 0]
        for v in np.unique(visits):
            if len(self.visit_codes[v]) >= self.n_codes:
                continue
            rows = np.flatnonzero(visits == v)
            out[rows] = self.sample(rng, int(v), (rows.size, k))
        return out


def sample_negatives(rng: np.random.Generator, positive: tuple[int, int], k: int,
                     graph: BipartiteGraph, power: float = 0.75) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be at least 1")
    return NegativeSampler(graph, power).sample(rng, int(positive[0]), k)


def structural_loss(edges: np.ndarray, negatives: np.ndarray, p: Mapping[str, ad.Node],
                    visit_attrs: np.ndarray, code_attrs: np.ndarray) -> ad.Node:
    """Mean over positive edges of -[log P(pos) + sum_j log(1 - P(neg_j))].

    ``negatives`` has shape ``(len(edges), K)``; K may be zero and entries
    of -1 are skipped.
    """
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    if len(edges) == 0:
        raise ValueError("empty structural batch")
    negatives = np.asarray(negatives, dtype=np.intp).reshape(len(edges), -1)
    valid = negatives.ravel() >= 0
    vis, v_pos = np.unique(edges[:, 0], return_inverse=True)
    cod, c_inv = np.unique(np.concatenate([edges[:, 1], negatives.ravel()[valid]]),
                           return_inverse=True)
    c_pos, c_neg = c_inv[:len(edges)], c_inv[len(edges):]

    mu_v, var_v = encode_nodes(visit_attrs[vis], p["W_v"], p)
    mu_c, var_c = encode_nodes(code_attrs[cod], p["W_c"], p)
    feat_v = ad.concat([mu_v, ad.sqrt(var_v)], axis=1)
    feat_c = ad.concat([mu_c, ad.sqrt(var_c)], axis=1)

    total = ad.sum(ad.log_sigmoid(-_w2_rows(feat_v, v_pos, feat_c, c_pos)))
    if c_neg.size:
        rep = np.repeat(v_pos, negatives.shape[1])[valid]
        total = total + ad.sum(ad.log_sigmoid(_w2_rows(feat_v, rep, feat_c, c_neg)))
    return -total * (1.0 / len(edges))
