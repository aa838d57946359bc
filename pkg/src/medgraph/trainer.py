"""Joint optimisation of the structural, temporal and task objectives."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .cohort import Cohort, MissingTaskError, with_identity_code_attributes
from .encoder import NegativeSampler, encode_nodes, init_encoder, structural_loss
from .risk import LOSS_MODES, MissingLabelError, init_head, predict_nodes, task_loss
from .temporal import (CELLS, MARKER_NOISE, SequenceBatch, batch_nll, init_temporal,
                       make_batch, marker_nodes, run_cell, stacked_states)

log = logging.getLogger(__name__)

MAGIC = b"MGCK"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    dim: int = 128            # embedding size L
    m: int = 256              # intermediate encoder width
    hidden: int = 64          # recurrent state size m'
    negatives: int = 10       # K
    lr: float = 0.001
    batch_visits: int = 128
    batch_seqs: int = 32
    epochs: int = 30
    seed: int = 0
    cell: str = "gated"
    marker_noise: str = "variance"
    task: str | None = None
    loss_mode: str = "softmax-ce"
    constant_gaps: bool = False  # time-series ablation: every input gap is 1
    time_scale: float = 30.0     # days per model time unit
    holdout: float = 0.2         # fraction of patients kept out of training
    clip_norm: float | None = None
    identity_code_attrs: bool = False  # no-attribute ablation: one-hot code attributes

    def validate(self) -> "TrainConfig":
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss coefficients must be nonnegative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("at least one loss coefficient must be positive")
        if self.gamma > 0 and not self.task:
            raise ConfigError("gamma > 0 needs a task")
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}")
        if self.marker_noise not in MARKER_NOISE:
            raise ConfigError(f"marker_noise must be one of {MARKER_NOISE}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must be in [0, 1)")
        for name in ("dim", "m", "hidden", "batch_visits", "batch_seqs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.negatives < 0 or self.epochs < 0 or self.lr <= 0 or self.time_scale <= 0:
            raise ConfigError("negatives/epochs must be >= 0, lr and time_scale > 0")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ params

class ParamStore:
    """Named trainable arrays plus Adam moment estimates."""

    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params: Mapping[str, np.ndarray]):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def leaves(self) -> dict[str, ad.Node]:
        return {k: ad.param(v, name=k) for k, v in self.params.items()}

    def collect(self, leaves: Mapping[str, ad.Node]) -> None:
        self.grads = {k: (np.zeros_like(self.params[k]) if n.grad is None else n.grad)
                      for k, n in leaves.items()}


def adam_step(store: ParamStore, lr: float, clip_norm: float | None = None) -> ParamStore:
    for name, g in store.grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    grads = store.grads
    if clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip_norm:
            grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
    store.step += 1
    t = store.step
    b1, b2 = store.beta1, store.beta2
    for name, g in grads.items():
        store.m[name] = b1 * store.m[name] + (1 - b1) * g
        store.v[name] = b2 * store.v[name] + (1 - b2) * g * g
        m_hat = store.m[name] / (1 - b1 ** t)
        v_hat = store.v[name] / (1 - b2 ** t)
        store.params[name] = store.params[name] - lr * m_hat / (np.sqrt(v_hat) + store.eps)
    return store


def init_params(cfg: TrainConfig, d_v: int, d_c: int, n_classes: int,
                rng: np.random.Generator) -> dict:
    params = init_encoder(rng, d_v, d_c, cfg.m, cfg.dim)
    params.update(init_temporal(rng, cfg.dim, cfg.hidden, cfg.cell))
    if cfg.task:
        params.update(init_head(rng, cfg.hidden, n_classes))
    return params


# -------------------------------------------------------------------- data

@dataclass
class TrainData:
    """Arrays the loss needs, derived once from a cohort."""
    visit_attrs: np.ndarray
    code_attrs: np.ndarray
    sequences: list[np.ndarray]       # global visit indices per patient
    times: list[np.ndarray]
    labels: np.ndarray | None         # (n_visits, s) for the configured task
    sampler: NegativeSampler
    train_patients: np.ndarray
    test_patients: np.ndarray
    train_visits: np.ndarray
    visit_edges: list[np.ndarray] = field(repr=False, default_factory=list)

    @classmethod
    def from_cohort(cls, cohort: Cohort, cfg: TrainConfig) -> "TrainData":
        cohort = model_cohort(cohort, cfg)
        seqs = [np.array([v.index for v in p.visits], dtype=np.intp) for p in cohort.patients]
        labels = None
        if cfg.task:
            labels = task_labels(cohort, cfg.task)
            if cfg.gamma > 0 and np.isnan(labels).any():
                raise MissingLabelError(f"gamma > 0 but some visits lack a {cfg.task!r} label")
        train, test = split_patients(len(seqs), cfg.seed, cfg.holdout)
        train_visits = np.concatenate([seqs[i] for i in train])
        return cls(
            visit_attrs=cohort.graph.visit_attributes,
            code_attrs=cohort.graph.code_attributes,
            sequences=seqs,
            times=[p.timestamps for p in cohort.patients],
            labels=labels,
            sampler=NegativeSampler(cohort.graph),
            train_patients=train,
            test_patients=test,
            train_visits=train_visits,
            visit_edges=[np.array([(v.index, c) for c in v.codes], dtype=np.intp)
                         for v in cohort.visits],
        )


def model_cohort(cohort: Cohort, cfg: TrainConfig) -> Cohort:
    """The cohort as the model sees it (identity code attributes under the ablation)."""
    return with_identity_code_attributes(cohort) if cfg.identity_code_attrs else cohort


def task_labels(cohort: Cohort, task: str) -> np.ndarray:
    """(n_visits, s) float array; rows are NaN for unlabeled visits."""
    s = None
    for v in cohort.visits:
        y = v.label(task)
        if y is not None:
            s = len(y)
            break
    if s is None:
        raise MissingTaskError(f"no visit carries a {task!r} label")
    out = np.full((len(cohort.visits), s), np.nan)
    for v in cohort.visits:
        y = v.label(task)
        if y is not None:
            out[v.index] = y
    return out


def split_patients(n: int, seed: int, holdout: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test split of patient indices."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_test = int(round(holdout * n))
    if holdout > 0 and n_test == 0 and n > 1:
        n_test = 1
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class StructBatch:
    edges: np.ndarray
    negatives: np.ndarray


@dataclass
class SeqBatch:
    visits: np.ndarray          # unique global visit indices in the batch
    batch: SequenceBatch        # rows index into ``visits``
    eps: np.ndarray | None      # marker noise, one row per entry of ``visits``
    labels: np.ndarray | None   # (n_visits_in_batch, s) aligned with ``visits``


def make_struct_batch(data: TrainData, visits: np.ndarray, k: int,
                      rng: np.random.Generator) -> StructBatch:
    edges = np.concatenate([data.visit_edges[v] for v in visits])
    negatives = (data.sampler.sample_edges(rng, edges, k) if k > 0
                 else np.zeros((len(edges), 0), dtype=np.intp))
    return StructBatch(edges, negatives)


def make_seq_batch(data: TrainData, patients, cfg: TrainConfig,
                   rng: np.random.Generator | None) -> SeqBatch:
    seqs = [data.sequences[i] for i in patients]
    visits = np.concatenate(seqs)
    offsets = np.cumsum([0] + [len(s) for s in seqs])
    rows = [np.arange(offsets[j], offsets[j + 1]) for j in range(len(seqs))]
    batch = make_batch(rows, [data.times[i] for i in patients], cfg.time_scale,
                       cfg.constant_gaps)
    eps = None
    if rng is not None and cfg.marker_noise != "off":
        eps = rng.standard_normal((len(visits), cfg.dim))
    labels = None if data.labels is None else data.labels[visits]
    return SeqBatch(visits, batch, eps, labels)


# -------------------------------------------------------------------- loss

def sequence_forward(seq: SeqBatch, cfg: TrainConfig, p: Mapping[str, ad.Node],
                     visit_attrs: np.ndarray) -> ad.Node:
    """Stacked hidden states (T*B, m') for a sequence batch."""
    mu, var = encode_nodes(visit_attrs[seq.visits], p["W_v"], p)
    markers = marker_nodes(mu, var, seq.eps, cfg.marker_noise)
    return stacked_states(run_cell(markers, seq.batch, p, cfg.cell))


def unified_loss(struct_batch: StructBatch | None, seq_batch: SeqBatch | None,
                 cfg: TrainConfig, p: Mapping[str, ad.Node], data: TrainData):
    """alpha * L_struc + beta * L_temp + gamma * L_tsk.

    Terms with a zero coefficient are skipped. Returns ``(loss, terms)``
    where ``terms`` maps each evaluated term to its float value.
    """
    if cfg.alpha + cfg.beta + cfg.gamma <= 0:
        raise ConfigError("at least one loss coefficient must be positive")
    total, terms = None, {}

    def acc(name, coef, node):
        nonlocal total
        terms[name] = float(node.value)
        scaled = node * coef
        total = scaled if total is None else total + scaled

    if cfg.alpha > 0:
        if struct_batch is None or len(struct_batch.edges) == 0:
            raise ValueError("alpha > 0 needs a structural batch")
        acc("struct", cfg.alpha, structural_loss(struct_batch.edges, struct_batch.negatives, p,
                                                 data.visit_attrs, data.code_attrs))
    if cfg.beta > 0 or cfg.gamma > 0:
        if seq_batch is None:
            raise ValueError("beta or gamma > 0 needs a sequence batch")
        H = sequence_forward(seq_batch, cfg, p, data.visit_attrs)
        b = seq_batch.batch
        B, T = b.rows.shape
        if cfg.beta > 0:
            acc("temp", cfg.beta, batch_nll(H, b, p) * (1.0 / B))
        if cfg.gamma > 0:
            if seq_batch.labels is None or np.isnan(seq_batch.labels).any():
                raise MissingLabelError("gamma > 0 needs labels on every visit")
            # H rows are step-major; labels follow the flattened batch rows.
            Y = np.zeros((T * B, seq_batch.labels.shape[1]))
            w = np.zeros(T * B)
            for j in range(B):
                n = b.lengths[j]
                idx = np.arange(n) * B + j
                Y[idx] = seq_batch.labels[b.rows[j, :n]]
                w[idx] = 1.0 / (n * B)
            keep = w > 0
            probs = predict_nodes(ad.take(H, np.flatnonzero(keep)), p)
            acc("task", cfg.gamma, task_loss(Y[keep], probs, cfg.loss_mode, w[keep]))
    terms["total"] = float(total.value)
    return total, terms


# ------------------------------------------------------------------- train

@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def series(self, term: str) -> list[float]:
        return [e[term] for e in self.epochs if term in e]


def train(cohort: Cohort, cfg: TrainConfig, data: TrainData | None = None,
          callback=None) -> tuple[ParamStore, History]:
    """Run ``cfg.epochs`` passes over the training patients.

    Each step pairs ``batch_seqs`` shuffled patients with the edges of
    ``batch_visits`` uniformly drawn training visits and takes one Adam step
    on the unified loss. Fully determined by ``cfg.seed``.
    """
    cfg.validate()
    data = data or TrainData.from_cohort(cohort, cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, order_rng, struct_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    n_classes = 0 if data.labels is None else data.labels.shape[1]
    store = ParamStore(init_params(cfg, data.visit_attrs.shape[1], data.code_attrs.shape[1],
                                   n_classes, init_rng))
    history = History()
    need_seq = cfg.beta > 0 or cfg.gamma > 0
    train_p = data.train_patients
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(train_p)
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, len(order), cfg.batch_seqs):
            chunk = order[start:start + cfg.batch_seqs]
            sb = None
            if cfg.alpha > 0:
                vis = struct_rng.choice(data.train_visits, size=min(cfg.batch_visits,
                                        len(data.train_visits)), replace=False)
                sb = make_struct_batch(data, vis, cfg.negatives, struct_rng)
            qb = make_seq_batch(data, chunk, cfg, noise_rng) if need_seq else None
            leaves = store.leaves()
            loss, terms = unified_loss(sb, qb, cfg, leaves, data)
            ad.backward(loss)
            store.collect(leaves)
            adam_step(store, cfg.lr, cfg.clip_norm)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        record = {"epoch": epoch + 1, **{k: v / n_steps for k, v in sums.items()}}
        history.epochs.append(record)
        log.info("epoch %d %s", epoch + 1,
                 " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        if callback is not None:
            callback(epoch + 1, store)
    return store, history


# --------------------------------------------------------------- inference

def embed(params: Mapping[str, np.ndarray], X: np.ndarray, kind: str):
    """(mu, var) arrays for attribute rows of ``kind`` ("visit" or "code")."""
    p = {k: ad.const(v) for k, v in params.items()}
    W = p["W_v"] if kind == "visit" else p["W_c"]
    mu, var = encode_nodes(X, W, p)
    return mu.value, var.value


def predict_risk(params: Mapping[str, np.ndarray], cfg: TrainConfig, data: TrainData,
                 patients) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (noise-free) class probabilities for every visit of
    ``patients``. Returns ``(probs, visit_indices)`` in visit order."""
    p = {k: ad.const(v) for k, v in params.items()}
    probs, visits = [], []
    patients = np.asarray(patients)
    for start in range(0, len(patients), 256):
        qb = make_seq_batch(data, patients[start:start + 256], cfg, None)
        H = sequence_forward(qb, cfg, p, data.visit_attrs)
        P = predict_nodes(H, p).value
        b = qb.batch
        B = b.rows.shape[0]
        for j in range(B):
            n = b.lengths[j]
            probs.append(P[np.arange(n) * B + j])
            visits.append(qb.visits[b.rows[j, :n]])
    return np.concatenate(probs), np.concatenate(visits)


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    arrays: dict[str, np.ndarray]
    history: list[dict]


def save_checkpoint(params, cfg: TrainConfig, path, history: History | list | None = None):
    arrays = params.params if isinstance(params, ParamStore) else dict(params)
    hist = history.epochs if isinstance(history, History) else list(history or [])
    directory, blobs, offset = [], [], 0
    for name in sorted(arrays):
        blob = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arrays[name])),
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": asdict(cfg), "arrays": directory, "history": hist},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_version: int = FORMAT_VERSION) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != expected_version:
        raise CheckpointError(f"{path}: format version {version}, reader expects {expected_version}")
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        start = base + entry["offset"]
        if entry["nbytes"] != nbytes or start + nbytes > len(raw):
            raise CheckpointError(f"{path}: corrupt payload for {entry['name']!r}")
        arrays[entry["name"]] = (np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start)
                                 .astype(np.float64).reshape(shape))
    expected_end = base + sum(e["nbytes"] for e in header["arrays"])
    if expected_end != len(raw):
        raise CheckpointError(f"{path}: payload length {len(raw) - base} does not match directory")
    return Checkpoint(version, TrainConfig.from_dict(header["config"]), arrays, header["history"])


def export_embeddings(params, cohort: Cohort, path) -> None:
    """TSV: node_id, kind, mu_0..mu_{L-1}, var_0..var_{L-1}; visits then codes."""
    params = params.params if isinstance(params, ParamStore) else params
    mu_v, var_v = embed(params, cohort.graph.visit_attributes, "visit")
    mu_c, var_c = embed(params, cohort.graph.code_attributes, "code")
    L = mu_v.shape[1]
    cols = ["node_id", "kind"] + [f"mu_{i}" for i in range(L)] + [f"var_{i}" for i in range(L)]
    fmt = lambda row: "\t".join(f"{x:.9g}" for x in row)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(cols) + "\n")
        for nodes, kind, mu, var in ((cohort.visits, "visit", mu_v, var_v),
                                     (cohort.codes, "code", mu_c, var_c)):
            for node, m_row, v_row in zip(nodes, mu, var):
                fh.write(f"{node.id}\t{kind}\t{fmt(m_row)}\t{fmt(v_row)}\n")
