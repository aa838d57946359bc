"""Seeded synthetic cohorts with planted structure.

Generative story, per patient:

* latent severity ``s ~ N(0, 1)``;
* visit count tilted upward by severity (uniform marginal over the range);
* class preferences from a Dirichlet around global class popularity, with
  the first ``n_severe_classes`` classes up-weighted by ``exp(s)``;
* codes per visit drawn from preferred classes, Zipf popularity within class;
* gaps exponential with rate ``base_gap_rate * exp(gap_severity * s_i)``,
  where ``s_i`` drifts linearly over the sequence by ``severity_drift``;
* visit attributes: demographic noise plus a noisy severity channel.

Labels: ``readmit30`` is 1 iff the next gap is under 30 days (the gap after
the final visit is simulated but not recorded as a visit); ``mortality`` is 1
on the final visit of patients above the ``mortality_quantile`` of severity.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .cohort import Cohort, build_cohort, cohort_stats, save_cohort


class GenConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    n_patients: int = 500
    n_codes: int = 300
    n_code_classes: int = 10
    D_v: int = 16
    D_c: int = 32
    visits_per_patient: tuple[int, int] = (2, 20)
    codes_per_visit: tuple[int, int] = (2, 8)
    base_gap_rate: float = 1.0 / 45.0   # per day, at severity 0
    gap_severity: float = 1.0           # log-rate slope in severity
    severity_drift: float = 0.5         # severity change from first to last visit
    severity_signal: float = 0.5        # weight of severity in the visit attributes
    visit_count_tilt: float = 0.6       # correlation of severity with visit count
    class_popularity_decay: float = 0.35
    code_zipf: float = 1.0
    preference_concentration: float = 2.0
    n_severe_classes: int = 3          # capped at n_code_classes
    prototype_spacing: float = 4.0
    attr_noise: float = 0.3
    mortality_quantile: float = 0.75
    seed: int = 0

    def validate(self) -> "GenConfig":
        lo, hi = self.visits_per_patient
        clo, chi = self.codes_per_visit
        if self.n_patients < 0 or self.n_codes < 2:
            raise GenConfigError("need n_patients >= 0 and n_codes >= 2")
        if not 1 <= self.n_code_classes <= self.n_codes:
            raise GenConfigError("n_code_classes must be in [1, n_codes]")
        if not 2 <= lo <= hi:
            raise GenConfigError("visits_per_patient must satisfy 2 <= min <= max")
        if not 1 <= clo <= chi:
            raise GenConfigError("codes_per_visit must satisfy 1 <= min <= max")
        if chi > self.n_codes:
            raise GenConfigError("codes_per_visit max exceeds n_codes")
        if self.base_gap_rate <= 0 or self.attr_noise <= 0 or self.prototype_spacing <= 0:
            raise GenConfigError("rates, noise and spacing must be positive")
        if self.D_v < 2 or self.D_c < 1:
            raise GenConfigError("need D_v >= 2 and D_c >= 1")
        if self.n_severe_classes < 0:
            raise GenConfigError("n_severe_classes must be >= 0")
        if not 0 < self.mortality_quantile < 1 or not -1 < self.visit_count_tilt < 1:
            raise GenConfigError("mortality_quantile and visit_count_tilt out of range")
        return self

    @classmethod
    def from_dict(cls, d) -> "GenConfig":
        d = dict(d)
        for key in ("visits_per_patient", "codes_per_visit"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GenConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @property
    def mean_visits(self) -> float:
        return sum(self.visits_per_patient) / 2

    @property
    def mean_codes(self) -> float:
        return sum(self.codes_per_visit) / 2


def _prototypes(rng, k: int, dim: int, spacing: float) -> np.ndarray:
    """k well-separated class centres with minimum pairwise distance ``spacing``."""
    if k <= dim:
        return spacing / np.sqrt(2) * np.eye(dim)[:k] * np.where(rng.random(k) < 0.5, -1, 1)[:, None]
    P = rng.standard_normal((k, dim))
    d = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    d[np.diag_indices(k)] = np.inf
    return P * (spacing / d.min())


def _code_tables(cfg: GenConfig, rng):
    """Class of each code, prototypes, attributes and within-class popularity."""
    K, n = cfg.n_code_classes, cfg.n_codes
    classes = np.sort(np.arange(n) % K)  # contiguous blocks of near-equal size
    protos = _prototypes(rng, K, cfg.D_c, cfg.prototype_spacing)
    attrs = protos[classes] + cfg.attr_noise * rng.standard_normal((n, cfg.D_c))
    members = [np.flatnonzero(classes == k) for k in range(K)]
    popularity = []
    for m in members:
        w = 1.0 / np.arange(1, m.size + 1) ** cfg.code_zipf
        popularity.append(rng.permutation(w / w.sum()))
    class_weight = np.exp(-cfg.class_popularity_decay * np.arange(K))
    return classes, attrs, members, popularity, class_weight / class_weight.sum()


def _patient(cfg: GenConfig, tables, seed: np.random.SeedSequence, pid: int):
    classes, _, members, popularity, class_weight = tables
    rng = np.random.default_rng(seed)
    K = cfg.n_code_classes
    sev = rng.standard_normal()
    lo, hi = cfg.visits_per_patient
    rho = cfg.visit_count_tilt
    u = ndtr(rho * sev + np.sqrt(1 - rho * rho) * rng.standard_normal())
    T = lo + min(int(u * (hi - lo + 1)), hi - lo)

    boost = np.ones(K)
    boost[:cfg.n_severe_classes] = np.exp(sev)
    alpha = cfg.preference_concentration * K * class_weight * boost / (class_weight * boost).sum()
    prefs = rng.dirichlet(np.maximum(alpha, 1e-3))

    sev_t = sev + cfg.severity_drift * (np.arange(T + 1) / max(T, 1) - 0.5)
    rates = cfg.base_gap_rate * np.exp(cfg.gap_severity * sev_t)
    gaps = rng.exponential(1.0 / rates)  # gaps[i]: time from visit i to visit i + 1
    times = np.round(np.concatenate([[rng.uniform(0, 365)], gaps[:T - 1]]).cumsum(), 6)
    # labels follow the recorded (rounded) timestamps exactly
    next_gap = np.append(np.diff(times), gaps[T - 1])

    age = rng.uniform(-1, 1)
    sex = float(rng.random() < 0.5)
    clo, chi = cfg.codes_per_visit
    visits = []
    for i in range(T):
        n_codes = rng.integers(clo, chi + 1)
        picked: set[int] = set()
        while len(picked) < n_codes:
            k = rng.choice(K, p=prefs)
            picked.add(int(members[k][rng.choice(members[k].size, p=popularity[k])]))
        x = np.empty(cfg.D_v)
        x[0] = age + 0.05 * rng.standard_normal()
        x[1] = sex
        x[2] = cfg.severity_signal * sev_t[i] + rng.standard_normal()
        x[3:] = rng.standard_normal(cfg.D_v - 3) if cfg.D_v > 3 else []
        readmit = int(next_gap[i] < 30.0)
        visits.append({
            "visit_id": f"p{pid}_v{i}",
            "t": float(times[i]),
            "x": [round(float(a), 6) for a in x],
            "codes": [f"c{c}" for c in sorted(picked)],
            "_readmit": readmit,
        })
    return sev, visits


def generate(cfg: GenConfig, workers: int = 1) -> Cohort:
    """Build a cohort; identical for any ``workers`` given the same seed."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    table_seed, patient_root = root.spawn(2)
    tables = _code_tables(cfg, np.random.default_rng(table_seed))
    seeds = patient_root.spawn(cfg.n_patients)
    args = [(cfg, tables, s, i) for i, s in enumerate(seeds)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda a: _patient(*a), args))
    else:
        results = [_patient(*a) for a in args]

    sev = np.array([r[0] for r in results])
    cut = np.quantile(sev, cfg.mortality_quantile) if len(sev) else 0.0
    patients = []
    for pid, (s, visits) in enumerate(results):
        for i, v in enumerate(visits):
            r = v.pop("_readmit")
            dead = int(i == len(visits) - 1 and s > cut)
            v["y"] = {"readmit30": [1 - r, r], "mortality": [1 - dead, dead]}
        patients.append((f"p{pid}", visits))

    classes, attrs = tables[0], tables[1]
    codes = [{"code_id": f"c{j}", "x": [round(float(a), 6) for a in attrs[j]],
              "class": f"k{classes[j]}"} for j in range(cfg.n_codes)]
    return build_cohort(patients, codes)


def severity_of(cfg: GenConfig) -> np.ndarray:
    """Latent severity per patient, for generator self-audits."""
    root = np.random.SeedSequence(cfg.seed)
    _, patient_root = root.spawn(2)
    return np.array([np.random.default_rng(s).standard_normal()
                     for s in patient_root.spawn(cfg.n_patients)])


def write_cohort(cohort: Cohort, cfg: GenConfig, out_dir) -> dict:
    """Write JSONL files and ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    save_cohort(cohort, out_dir)
    stats = asdict(cohort_stats(cohort))
    labels = {}
    for task in sorted(cohort.tasks()):
        ys = [v.labels[task][-1] for v in cohort.visits if task in v.labels]
        labels[task] = float(np.mean(ys)) if ys else 0.0
    manifest = {"config": asdict(cfg), "stats": stats, "label_prevalence": labels}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
