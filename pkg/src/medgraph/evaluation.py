"""Ranking metrics, code-class probes, uncertainty trends and 2-D projection."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class MetricReport:
    task: str
    auc: float
    ap: float
    n_pos: int
    n_neg: int


@dataclass
class ProbeReport:
    train_fraction: float
    micro_f1: float
    macro_f1: float
    seed: int = 0


def _check_binary(scores, labels, need_neg=True):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching 1-D")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or (need_neg and n_pos == labels.size):
        raise DegenerateLabelsError("need at least one positive and one negative label")
    return scores, labels


def auc(scores, labels) -> float:
    """Rank-sum AUC with average ranks for ties."""
    scores, labels = _check_binary(scores, labels)
    ranks = stats.rankdata(scores)  # average ranks, exact halves
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of (recall step) * precision down the ranking; ties keep input order."""
    scores, labels = _check_binary(scores, labels, need_neg=False)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / hits.sum())


def risk_report(task: str, scores, labels) -> MetricReport:
    labels = np.asarray(labels).astype(int)
    return MetricReport(task, auc(scores, labels), average_precision(scores, labels),
                        int(labels.sum()), int((labels == 0).sum()))


# -------------------------------------------------------------------- probe

def f1_scores(y_true, y_pred) -> tuple[float, float]:
    """(micro, macro) F1 for single-label multi-class predictions.

    Macro averages over every class seen in either array.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    micro = float((y_true == y_pred).mean())
    f1s = []
    for k in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = np.sum((y_pred != k) & (y_true == k))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return micro, float(np.mean(f1s))


def fit_softmax_regression(X: np.ndarray, y: np.ndarray, n_classes: int,
                           tol: float = 1e-5, max_iter: int = 5000) -> np.ndarray:
    """Unregularised multinomial logistic regression by gradient descent.

    ``X`` already carries an intercept column. Step size is the inverse of a
    Lipschitz bound on the gradient.
    """
    n = X.shape[0]
    W = np.zeros((X.shape[1], n_classes))
    Y = np.eye(n_classes)[y]
    lip = 0.5 * np.linalg.norm(X, 2) ** 2 / n
    lr = 1.0 / max(lip, 1e-12)
    for _ in range(max_iter):
        Z = X @ W
        Z -= Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        G = X.T @ (P - Y) / n
        if np.linalg.norm(G) < tol:
            break
        W -= lr * G
    return W


def logistic_probe(embeddings, classes: Sequence, train_fraction: float, seed: int = 0
                   ) -> ProbeReport:
    """Train on a random ``train_fraction`` of rows, report F1 on the rest."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    X = np.asarray(embeddings, dtype=np.float64)
    names, y = np.unique(np.asarray(classes), return_inverse=True)
    if names.size < 2:
        raise DegenerateLabelsError("probe needs at least two classes")
    perm = np.random.default_rng(seed).permutation(len(y))
    n_train = min(max(int(round(train_fraction * len(y))), 1), len(y) - 1)
    tr, te = perm[:n_train], perm[n_train:]
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    W = fit_softmax_regression(Z[tr], y[tr], names.size)
    pred = np.argmax(Z[te] @ W, axis=1)
    micro, macro = f1_scores(y[te], pred)
    return ProbeReport(train_fraction, micro, macro, seed)


def probe_sweep(embeddings, classes, fractions=tuple(np.round(np.arange(0.1, 1.0, 0.1), 1)),
                seed: int = 0) -> list[ProbeReport]:
    return [logistic_probe(embeddings, classes, float(f), seed) for f in fractions]


# -------------------------------------------------------------- uncertainty

def node_variance(var: np.ndarray, top: int = 10) -> np.ndarray:
    """Mean of each row's ``top`` largest variance components."""
    var = np.asarray(var, dtype=np.float64)
    k = min(top, var.shape[1])
    return np.sort(var, axis=1)[:, -k:].mean(axis=1)


def _spearman(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(stats.spearmanr(x, y)[0])


@dataclass
class BucketTrend:
    centers: list[float] = field(default_factory=list)
    mean_variance: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    spearman: float = 0.0


def bucket_trend(keys, values, n_buckets: int) -> BucketTrend:
    """Equal-width buckets over ``keys``; Spearman of bucket index vs mean value."""
    keys, values = np.asarray(keys, dtype=np.float64), np.asarray(values, dtype=np.float64)
    lo, hi = keys.min(), keys.max()
    edges = np.linspace(lo, hi, n_buckets + 1)
    idx = np.clip(np.searchsorted(edges, keys, side="right") - 1, 0, n_buckets - 1)
    trend = BucketTrend()
    order = []
    for b in range(n_buckets):
        sel = idx == b
        if sel.any():
            order.append(b)
            trend.centers.append(float((edges[b] + edges[b + 1]) / 2))
            trend.mean_variance.append(float(values[sel].mean()))
            trend.counts.append(int(sel.sum()))
    trend.spearman = _spearman(order, trend.mean_variance)
    return trend


@dataclass
class UncertaintyReport:
    visits: BucketTrend
    codes: BucketTrend


def uncertainty_report(visit_var, visit_patient_len, code_var, code_degree,
                       visit_buckets: int = 20, code_buckets: int = 10) -> UncertaintyReport:
    """Visits bucketed by their patient's visit count, codes by log10 degree.

    Codes with zero degree are left out (their log degree is undefined).
    """
    v = node_variance(visit_var)
    c = node_variance(code_var)
    deg = np.asarray(code_degree)
    seen = deg > 0
    return UncertaintyReport(
        bucket_trend(visit_patient_len, v, visit_buckets),
        bucket_trend(np.log10(deg[seen]), c[seen], code_buckets),
    )


# ---------------------------------------------------------------------- pca

def pca_2d(X, tol: float = 1e-9, max_iter: int = 10000, seed: int = 0) -> np.ndarray:
    """Project mean-centred rows onto the top two principal directions.

    Directions come from power iteration with deflation on the covariance;
    each direction's largest-magnitude loading is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 3:
        raise ValueError("pca_2d needs at least three rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    rng = np.random.default_rng(seed)
    floor = 1e-12 * max(float(np.trace(C)), 1e-300)  # leftover below this is round-off
    dirs = []
    for _ in range(2):
        v = rng.standard_normal(C.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = C @ v
            for d in dirs:
                w -= (d @ w) * d
            norm = np.linalg.norm(w)
            if norm < floor:
                log.warning("pca_2d: data is rank deficient")
                v = np.zeros_like(v)
                break
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        if np.any(v):
            v = v * np.sign(v[np.argmax(np.abs(v))])
        dirs.append(v)
    return Xc @ np.stack(dirs, axis=1)


# ---------------------------------------------------------------- file output

def write_json(obj, path) -> None:
    data = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
