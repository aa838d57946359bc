"""Recurrent marked temporal point process over visit sequences.

The hidden state after visit i drives the conditional intensity of the next
visit::

    lambda(t) = exp(v_t . h_i + w_t (t - t_i) + b_t)

whose density has a closed form. Two recurrent cells share one parameter
layout: ``plain`` (relu recurrence) and ``gated`` (LSTM, gates packed as
``[input, forget, output, candidate]`` along the columns).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .cohort import PatientSequence
from .encoder import GaussianEmbedding, glorot

GAP_DIM = 2
CELLS = ("plain", "gated")
MARKER_NOISE = ("variance", "stddev", "off")


class ImproperDensityError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceState:
    h: np.ndarray
    t_last: float = 0.0
    c: np.ndarray | None = None  # gated cell memory


def initial_state(hidden: int, cell: str = "gated", t: float = 0.0) -> SequenceState:
    return SequenceState(np.zeros(hidden), t, np.zeros(hidden) if cell == "gated" else None)


def gap_features(gaps) -> np.ndarray:
    """(gap, log(1 + gap)) per row."""
    gaps = np.asarray(gaps, dtype=np.float64)
    return np.stack([gaps, np.log1p(gaps)], axis=-1)


def init_temporal(rng: np.random.Generator, dim: int, hidden: int, cell: str = "gated") -> dict:
    if cell not in CELLS:
        raise ValueError(f"unknown cell {cell!r}")
    width = hidden * (4 if cell == "gated" else 1)
    b_h = np.zeros(width)
    if cell == "gated":
        b_h[hidden:2 * hidden] = 1.0  # forget-gate bias
        W_h = np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=1)
    else:
        W_h = 0.5 * _orthogonal(rng, hidden)
    return {
        "W_tv": glorot(rng, dim, width),
        "W_g": glorot(rng, GAP_DIM, width),
        "W_h": W_h,
        "b_h": b_h,
        "v_t": glorot(rng, hidden, 1)[:, 0],
        "w_t": np.array(0.01),
        "b_t": np.array(0.0),
    }


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def event_marker(z: GaussianEmbedding, rng: np.random.Generator | None = None,
                 mode: str = "variance", eps: np.ndarray | None = None) -> np.ndarray:
    """Noisy event marker ``mu + eps * scale``; ``scale`` is the variance
    (``mode="variance"``), the standard deviation, or zero (``"off"``)."""
    if mode == "off":
        return z.mu.copy()
    if eps is None:
        eps = rng.standard_normal(z.mu.shape)
    scale = z.var if mode == "variance" else np.sqrt(z.var)
    return z.mu + eps * scale


def marker_nodes(mu: ad.Node, var: ad.Node, eps: np.ndarray | None, mode: str) -> ad.Node:
    if mode == "off" or eps is None:
        return mu
    scale = var if mode == "variance" else ad.sqrt(var)
    return mu + ad.mul(scale, eps)


def cell_step(p: Mapping[str, ad.Node], e, g, h, c=None, cell: str = "gated"):
    """One recurrence step on the tape. Returns ``(h, c)``."""
    pre = ad.matmul(e, p["W_tv"]) + ad.matmul(g, p["W_g"]) + ad.matmul(h, p["W_h"]) + p["b_h"]
    if cell == "plain":
        return ad.relu(pre), None
    n = p["W_h"].shape[0]
    squeeze = pre.ndim == 1
    if squeeze:
        pre = ad.reshape(pre, (1, -1))
    i = ad.sigmoid(ad.columns(pre, 0, n))
    f = ad.sigmoid(ad.columns(pre, n, 2 * n))
    o = ad.sigmoid(ad.columns(pre, 2 * n, 3 * n))
    cand = ad.tanh(ad.columns(pre, 3 * n, 4 * n))
    c_prev = ad.reshape(c, (1, -1)) if squeeze else c
    c_new = f * c_prev + i * cand
    h_new = o * ad.tanh(c_new)
    if squeeze:
        h_new, c_new = ad.reshape(h_new, (n,)), ad.reshape(c_new, (n,))
    return h_new, c_new


def _consts(p: Mapping[str, np.ndarray]) -> dict:
    return {k: ad.const(v) for k, v in p.items()}


def step(state: SequenceState, e, gap: float, p: Mapping[str, np.ndarray],
         cell: str = "gated") -> SequenceState:
    if gap < 0:
        raise ValueError(f"negative gap {gap}")
    g = gap_features(float(gap))
    h, c = cell_step(_consts(p), np.asarray(e, dtype=np.float64), g, state.h,
                     state.c if cell == "gated" else None, cell)
    return SequenceState(h.value, state.t_last + gap, None if c is None else c.value)


def intensity(state: SequenceState, t: float, p: Mapping[str, np.ndarray]) -> float:
    a = float(p["v_t"] @ state.h)
    return float(np.exp(a + float(p["w_t"]) * (t - state.t_last) + float(p["b_t"])))


def log_density_nodes(a, delta, w, b) -> ad.Node:
    """log f = a + b + w*delta - exp(a + b) * expm1(w*delta) / w."""
    base = a + b
    return base + ad.mul(w, delta) - ad.exp(base) * ad.expm1_ratio(w, delta)


def log_density(state: SequenceState, t: float, p: Mapping[str, np.ndarray]) -> float:
    if t < state.t_last:
        raise ValueError(f"t={t} precedes the last event at {state.t_last}")
    a = float(p["v_t"] @ state.h)
    node = log_density_nodes(ad.const(a), ad.const(t - state.t_last), ad.const(p["w_t"]),
                             ad.const(p["b_t"]))
    return float(node.value)


def gap_density(a_plus_b: float, w: float, delta):
    """Density of the next gap given ``a + b_t`` and ``w_t`` (numpy)."""
    delta = np.asarray(delta, dtype=np.float64)
    base = np.exp(a_plus_b)
    with np.errstate(over="ignore"):  # far tail: density underflows to 0
        ratio = delta if w == 0 else np.expm1(w * delta) / w
        return np.exp(a_plus_b + w * delta - base * ratio)


def predict_next_time(state: SequenceState, p: Mapping[str, np.ndarray]) -> float:
    """Expected time of the next event (quadrature, relative tol 1e-6)."""
    w = float(p["w_t"])
    if w <= 0:
        raise ImproperDensityError(f"w_t = {w} <= 0 gives an improper density")
    ab = float(p["v_t"] @ state.h) + float(p["b_t"])
    mean, _ = integrate.quad(lambda d: d * gap_density(ab, w, d), 0.0, np.inf,
                             epsrel=1e-6, epsabs=0.0, limit=200)
    return state.t_last + mean


def sample_gap(rng: np.random.Generator, a_plus_b: float, w: float) -> float:
    """Inverse-transform draw from the gap density (inf if no event occurs)."""
    budget = rng.exponential() / np.exp(a_plus_b)
    if w == 0:
        return budget
    arg = w * budget
    return float(np.log1p(arg) / w) if arg > -1 else float("inf")


# ------------------------------------------------------------- batched runs

@dataclass
class SequenceBatch:
    """Padded index/time arrays for B sequences of up to T visits.

    ``rows[b, i]`` indexes the marker matrix (padding repeats row 0),
    ``gaps_in[b, i]`` is the gap fed at step i (0 at the first visit) and
    ``gaps_next[b, i]`` the gap to visit i + 1.
    """
    rows: np.ndarray
    lengths: np.ndarray
    gaps_in: np.ndarray
    gaps_next: np.ndarray

    @property
    def step_mask(self) -> np.ndarray:
        T = self.rows.shape[1]
        return (np.arange(T)[None, :] < self.lengths[:, None]).astype(np.float64)

    @property
    def gap_mask(self) -> np.ndarray:
        T = self.rows.shape[1]
        return (np.arange(T - 1)[None, :] < (self.lengths[:, None] - 1)).astype(np.float64)


def make_batch(row_lists: Sequence[Sequence[int]], time_lists: Sequence[Sequence[float]],
               time_scale: float = 1.0, constant_gaps: bool = False) -> SequenceBatch:
    B = len(row_lists)
    lengths = np.array([len(r) for r in row_lists])
    T = int(lengths.max())
    rows = np.zeros((B, T), dtype=np.intp)
    gaps = np.zeros((B, T))
    for b, (r, t) in enumerate(zip(row_lists, time_lists)):
        rows[b, :len(r)] = r
        d = np.diff(np.asarray(t, dtype=np.float64)) / time_scale
        if (d < 0).any():
            raise ValueError("timestamps must be nondecreasing")
        gaps[b, 1:len(r)] = d
    gaps_in = gaps.copy()
    if constant_gaps:
        gaps_in[:, 1:] = 1.0
    return SequenceBatch(rows, lengths, gaps_in, gaps[:, 1:].copy())


def run_cell(markers: ad.Node, batch: SequenceBatch, p: Mapping[str, ad.Node],
             cell: str = "gated") -> list[ad.Node]:
    """Hidden states after each step, a list of T nodes of shape (B, m')."""
    B, T = batch.rows.shape
    n = p["W_h"].shape[0]
    h = ad.const(np.zeros((B, n)))
    c = ad.const(np.zeros((B, n))) if cell == "gated" else None
    feats = gap_features(batch.gaps_in)
    states = []
    for i in range(T):
        e = ad.take(markers, batch.rows[:, i])
        h, c = cell_step(p, e, feats[:, i, :], h, c, cell)
        states.append(h)
    return states


def stacked_states(states: list[ad.Node]) -> ad.Node:
    """(T*B, m') node; row ``i*B + b`` is step i of sequence b."""
    return ad.concat(states, axis=0)


def batch_nll(H: ad.Node, batch: SequenceBatch, p: Mapping[str, ad.Node]) -> ad.Node:
    """Sum over sequences of the negative log-likelihood of their gaps.

    ``H`` is the output of :func:`stacked_states`.
    """
    B, T = batch.rows.shape
    if T < 2:
        raise ValueError("sequences need at least two visits")
    a = ad.reshape(ad.matmul(H, p["v_t"]), (T, B)).T
    a = ad.columns(a, 0, T - 1)
    logf = log_density_nodes(a, batch.gaps_next, p["w_t"], p["b_t"])
    return -ad.sum(ad.mul(logf, batch.gap_mask))


def sequence_nll(timestamps, markers, p: Mapping[str, ad.Node], cell: str = "gated",
                 time_scale: float = 1.0, constant_gaps: bool = False) -> ad.Node:
    """Negative log-likelihood of one visit sequence given its markers.

    ``timestamps`` may be a :class:`PatientSequence`; ``markers`` is a (T, L)
    array or node, one row per visit.
    """
    if isinstance(timestamps, PatientSequence):
        timestamps = timestamps.timestamps
    markers = ad.const(markers)
    T = markers.shape[0]
    if T < 2:
        raise ValueError("sequence needs at least two visits")
    batch = make_batch([list(range(T))], [timestamps], time_scale, constant_gaps)
    H = stacked_states(run_cell(markers, batch, p, cell))
    return batch_nll(H, batch, p)
