"""Variant runs and the analyses built on trained models.

A variant is a named set of overrides on :class:`TrainConfig`:

``medgraph``           all three loss terms
``medgraph_s_not_t``   no temporal term, every input gap set to 1
``medgraph_not_s_t``   no structural term
``medgraph_not_a``     identity code attributes
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cohort import Cohort
from .evaluation import (MetricReport, ProbeReport, UncertaintyReport, logistic_probe,
                         risk_report, uncertainty_report)
from .trainer import History, ParamStore, TrainConfig, TrainData, embed, model_cohort, \
    predict_risk, train

VARIANTS = {
    "medgraph": {},
    "medgraph_s_not_t": {"beta": 0.0, "constant_gaps": True},
    "medgraph_not_s_t": {"alpha": 0.0},
    "medgraph_not_a": {"identity_code_attrs": True},
}

PROBE_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


def variant_name(cfg: TrainConfig) -> str:
    """Best-matching variant label for a config (used in reports)."""
    if cfg.identity_code_attrs:
        return "medgraph_not_a"
    if cfg.alpha == 0:
        return "medgraph_not_s_t"
    if cfg.beta == 0 and cfg.constant_gaps:
        return "medgraph_s_not_t"
    return "medgraph"


@dataclass
class Run:
    cfg: TrainConfig
    store: ParamStore
    history: History
    data: TrainData
    cohort: Cohort  # as seen by the model

    @property
    def params(self):
        return self.store.params


def run_config(cohort: Cohort, cfg: TrainConfig) -> Run:
    data = TrainData.from_cohort(cohort, cfg)
    store, history = train(cohort, cfg, data)
    return Run(cfg, store, history, data, model_cohort(cohort, cfg))


def run_variant(cohort: Cohort, variant: str, base: TrainConfig) -> Run:
    return run_config(cohort, variant_config(base, variant))


def risk_metrics(params, cfg: TrainConfig, data: TrainData, patients=None) -> MetricReport:
    """AUC/AP on ``patients`` (default: the held-out ones); the last label
    column is the positive class."""
    if patients is None:
        patients = data.test_patients
    probs, visits = predict_risk(params, cfg, data, patients)
    labels = data.labels[visits, -1]
    return risk_report(cfg.task, probs[:, -1], labels)


def code_features(params, cohort: Cohort, features: str = "mu") -> np.ndarray:
    """Probe inputs per code: ``mu`` alone or ``mu+var`` side by side."""
    mu, var = embed(params, cohort.graph.code_attributes, "code")
    if features == "mu":
        return mu
    if features == "mu+var":
        return np.hstack([mu, var])
    raise ValueError(f"unknown probe features {features!r}")


def probe_curve(params, cohort: Cohort, fractions=PROBE_FRACTIONS, seed: int = 0,
                features: str = "mu") -> list[ProbeReport]:
    classes = [c.code_class for c in cohort.codes]
    if any(c is None for c in classes):
        raise ValueError("every code needs a class for the probe")
    X = code_features(params, cohort, features)
    return [logistic_probe(X, classes, float(f), seed) for f in fractions]


def uncertainty(params, cohort: Cohort) -> UncertaintyReport:
    _, var_v = embed(params, cohort.graph.visit_attributes, "visit")
    _, var_c = embed(params, cohort.graph.code_attributes, "code")
    lens = np.empty(len(cohort.visits))
    for p in cohort.patients:
        for v in p.visits:
            lens[v.index] = len(p)
    return uncertainty_report(var_v, lens, var_c, cohort.graph.code_degree)
