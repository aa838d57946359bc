"""Visits, codes, patients and the visit-code bipartite graph.

Input is a pair of JSONL files::

    patients.jsonl  {"patient_id", "visits": [{"visit_id", "t", "x", "codes", "y"?}]}
    codes.jsonl     {"code_id", "x", "class"?}

``y`` is either a label vector (stored under the task name ``"default"``) or
an object mapping task names to label vectors.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TASK = "default"


class CohortError(ValueError):
    """Base class for invalid cohort input."""


class CohortParseError(CohortError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class DimensionError(CohortError):
    pass


class DanglingCodeError(CohortError):
    def __init__(self, code_id: str, visit_id: str):
        super().__init__(f"visit {visit_id!r} references unknown code {code_id!r}")
        self.code_id = code_id


class TimestampError(CohortError):
    pass


class MissingTaskError(CohortError):
    pass


@dataclass(frozen=True, eq=False)
class CodeNode:
    id: str
    index: int
    attributes: np.ndarray
    code_class: str | None = None


@dataclass(frozen=True, eq=False)
class Visit:
    id: str
    index: int
    timestamp: float
    attributes: np.ndarray
    codes: tuple[int, ...]
    labels: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def label(self, task: str) -> tuple[int, ...] | None:
        return self.labels.get(task)


@dataclass(frozen=True, eq=False)
class PatientSequence:
    patient_id: str
    visits: tuple[Visit, ...]

    def __len__(self):
        return len(self.visits)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([v.timestamp for v in self.visits], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    visits: tuple[Visit, ...]
    codes: tuple[CodeNode, ...]
    edges: np.ndarray  # (|E|, 2) int array of (visit index, code index)

    @property
    def code_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=len(self.codes))

    @property
    def visit_attributes(self) -> np.ndarray:
        return np.stack([v.attributes for v in self.visits])

    @property
    def code_attributes(self) -> np.ndarray:
        return np.stack([c.attributes for c in self.codes])


@dataclass(frozen=True, eq=False)
class Cohort:
    patients: tuple[PatientSequence, ...]
    graph: BipartiteGraph
    dims: tuple[int, int, int]  # (D_v, D_c, s); s = 0 when unlabeled

    @property
    def visits(self):
        return self.graph.visits

    @property
    def codes(self):
        return self.graph.codes

    def tasks(self) -> set[str]:
        names: set[str] = set()
        for v in self.visits:
            names.update(v.labels)
        return names

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return _canonical(self) == _canonical(other)

    __hash__ = None


def build_cohort(patients: Iterable[tuple[str, list[dict]]], codes: list[dict]) -> Cohort:
    """Validate raw patient/code records and assign indices in input order.

    ``patients`` yields ``(patient_id, visit_records)``; records use the JSONL
    field names. Single-visit patients are dropped with a warning.
    """
    code_nodes = []
    code_index: dict[str, int] = {}
    d_c = None
    for rec in codes:
        cid = str(rec["code_id"])
        if cid in code_index:
            raise CohortError(f"duplicate code id {cid!r}")
        x = _vector(rec["x"], f"code {cid!r}")
        if d_c is None:
            d_c = x.size
        elif x.size != d_c:
            raise DimensionError(f"code {cid!r} has {x.size} attributes, expected {d_c}")
        code_index[cid] = len(code_nodes)
        cls = rec.get("class")
        code_nodes.append(CodeNode(cid, len(code_nodes), x, None if cls is None else str(cls)))
    if not code_nodes:
        raise CohortError("no codes")

    seqs, visits, seen_visits, seen_patients = [], [], set(), set()
    d_v = None
    label_dims: dict[str, int] = {}
    for pid, records in patients:
        pid = str(pid)
        if pid in seen_patients:
            raise CohortError(f"duplicate patient id {pid!r}")
        seen_patients.add(pid)
        if len(records) < 2:
            log.warning("dropping patient %r with %d visit(s)", pid, len(records))
            continue
        pending = []
        last_t = -np.inf
        for rec in records:
            vid = str(rec["visit_id"])
            if vid in seen_visits:
                raise CohortError(f"duplicate visit id {vid!r}")
            seen_visits.add(vid)
            t = float(rec["t"])
            if not np.isfinite(t) or t < 0:
                raise TimestampError(f"visit {vid!r} has invalid timestamp {t}")
            if t < last_t:
                raise TimestampError(
                    f"patient {pid!r}: visit {vid!r} at t={t} precedes t={last_t}")
            last_t = t
            x = _vector(rec["x"], f"visit {vid!r}")
            if d_v is None:
                d_v = x.size
            elif x.size != d_v:
                raise DimensionError(f"visit {vid!r} has {x.size} attributes, expected {d_v}")
            if not rec.get("codes"):
                raise CohortError(f"visit {vid!r} has no codes")
            idx = []
            for cid in rec["codes"]:
                if str(cid) not in code_index:
                    raise DanglingCodeError(str(cid), vid)
                idx.append(code_index[str(cid)])
            labels = _labels(rec.get("y"), vid, label_dims)
            pending.append((vid, t, x, tuple(sorted(set(idx))), labels))
        seq_visits = []
        for vid, t, x, idx, labels in pending:
            visit = Visit(vid, len(visits), t, x, idx, labels)
            visits.append(visit)
            seq_visits.append(visit)
        seqs.append(PatientSequence(pid, tuple(seq_visits)))

    if not visits:
        raise CohortError("no patient with at least two visits")
    edges = np.array([(v.index, c) for v in visits for c in v.codes], dtype=np.intp)
    edges = edges.reshape(-1, 2)
    graph = BipartiteGraph(tuple(visits), tuple(code_nodes), edges)
    s = max(label_dims.values(), default=0)
    return Cohort(tuple(seqs), graph, (d_v or 0, d_c, s))


def _vector(raw, what: str) -> np.ndarray:
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DimensionError(f"{what}: attributes must be a nonempty list")
    if not np.isfinite(x).all():
        raise CohortError(f"{what}: non-finite attribute")
    return x


def _labels(raw, vid: str, dims: dict[str, int]) -> dict[str, tuple[int, ...]]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raw = {DEFAULT_TASK: raw}
    out = {}
    for task, vec in raw.items():
        vec = tuple(int(b) for b in vec)
        if not vec or any(b not in (0, 1) for b in vec) or sum(vec) < 1:
            raise CohortError(f"visit {vid!r}: label {task!r} must be a 0/1 vector with a 1")
        if dims.setdefault(task, len(vec)) != len(vec):
            raise DimensionError(f"visit {vid!r}: label {task!r} has length {len(vec)}")
        out[task] = vec
    return out


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortParseError(path, lineno, exc.msg) from None
            if not isinstance(obj, dict):
                raise CohortParseError(path, lineno, "expected a JSON object")
            out.append((lineno, obj))
    return out


def load_cohort(patients_path, codes_path) -> Cohort:
    codes = []
    for lineno, obj in _read_jsonl(codes_path):
        if "code_id" not in obj or "x" not in obj:
            raise CohortParseError(codes_path, lineno, "missing 'code_id' or 'x'")
        codes.append(obj)
    patients = []
    for lineno, obj in _read_jsonl(patients_path):
        if "patient_id" not in obj or not isinstance(obj.get("visits"), list):
            raise CohortParseError(patients_path, lineno, "missing 'patient_id' or 'visits'")
        for v in obj["visits"]:
            missing = {"visit_id", "t", "x", "codes"} - set(v)
            if missing:
                raise CohortParseError(patients_path, lineno, f"visit missing {sorted(missing)}")
        patients.append((obj["patient_id"], obj["visits"]))
    return build_cohort(patients, codes)


def load_cohort_dir(path) -> Cohort:
    path = Path(path)
    return load_cohort(path / "patients.jsonl", path / "codes.jsonl")


def _visit_record(v: Visit, codes) -> dict:
    rec = {"visit_id": v.id, "t": v.timestamp, "x": v.attributes.tolist(),
           "codes": [codes[c].id for c in v.codes]}
    if v.labels:
        if set(v.labels) == {DEFAULT_TASK}:
            rec["y"] = list(v.labels[DEFAULT_TASK])
        else:
            rec["y"] = {k: list(val) for k, val in sorted(v.labels.items())}
    return rec


def save_cohort(cohort: Cohort, out_dir) -> None:
    """Write ``patients.jsonl`` and ``codes.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    codes = cohort.codes
    with open(out_dir / "codes.jsonl", "w", encoding="utf-8") as fh:
        for c in codes:
            rec = {"code_id": c.id, "x": c.attributes.tolist()}
            if c.code_class is not None:
                rec["class"] = c.code_class
            fh.write(json.dumps(rec) + "\n")
    with open(out_dir / "patients.jsonl", "w", encoding="utf-8") as fh:
        for p in cohort.patients:
            rec = {"patient_id": p.patient_id,
                   "visits": [_visit_record(v, codes) for v in p.visits]}
            fh.write(json.dumps(rec) + "\n")


def _canonical(c: Cohort):
    codes = tuple((n.id, n.index, tuple(n.attributes.tolist()), n.code_class) for n in c.codes)
    pats = tuple(
        (p.patient_id, tuple(
            (v.id, v.index, v.timestamp, tuple(v.attributes.tolist()), v.codes,
             tuple(sorted(v.labels.items())))
            for v in p.visits))
        for p in c.patients)
    return codes, pats, c.graph.edges.tolist(), c.dims


def with_identity_code_attributes(cohort: Cohort) -> Cohort:
    """Replace every code attribute vector by a one-hot row of the identity."""
    eye = np.eye(len(cohort.codes))
    codes = tuple(CodeNode(c.id, c.index, eye[c.index], c.code_class) for c in cohort.codes)
    graph = BipartiteGraph(cohort.graph.visits, codes, cohort.graph.edges)
    return Cohort(cohort.patients, graph, (cohort.dims[0], len(codes), cohort.dims[2]))


def time_gaps(p: PatientSequence) -> np.ndarray:
    t = p.timestamps
    if t.size < 2:
        raise TimestampError(f"patient {p.patient_id!r} needs at least two visits")
    gaps = np.diff(t)
    if (gaps < 0).any():
        raise TimestampError(f"patient {p.patient_id!r} has a negative time gap")
    return gaps


@dataclass(frozen=True)
class StatsReport:
    patients: int = 0
    visits: int = 0
    avg_visits_per_patient: float = 0.0
    max_visits_per_patient: int = 0
    unique_codes: int = 0
    avg_codes_per_visit: float = 0.0
    max_codes_per_visit: int = 0


def cohort_stats(c: Cohort) -> StatsReport:
    if not c.patients:
        return StatsReport()
    lengths = np.array([len(p) for p in c.patients])
    per_visit = np.array([len(v.codes) for v in c.visits])
    return StatsReport(
        patients=len(c.patients),
        visits=int(lengths.sum()),
        avg_visits_per_patient=float(lengths.mean()),
        max_visits_per_patient=int(lengths.max()),
        unique_codes=int(np.unique(c.graph.edges[:, 1]).size),
        avg_codes_per_visit=float(per_visit.mean()),
        max_codes_per_visit=int(per_visit.max()),
    )
