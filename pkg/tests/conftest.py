import json

import numpy as np
import pytest

from medgraph.cohort import load_cohort

CODES = [
    {"code_id": "A", "x": [1.0, 0.0, 0.5], "class": "k0"},
    {"code_id": "B", "x": [0.0, 1.0, -0.5], "class": "k1"},
    {"code_id": "C", "x": [0.3, 0.3, 0.3], "class": "k0"},
]

PATIENTS = [
    {"patient_id": "p1", "visits": [
        {"visit_id": "v1", "t": 0.0, "x": [0.1, 1.0], "codes": ["A", "B"], "y": [1, 0]},
        {"visit_id": "v2", "t": 7.0, "x": [0.2, -1.0], "codes": ["A", "B", "C"], "y": [0, 1]},
    ]},
    {"patient_id": "p2", "visits": [
        {"visit_id": "v3", "t": 10.0, "x": [-0.5, 0.0], "codes": ["C"], "y": [0, 1]},
        {"visit_id": "v4", "t": 40.0, "x": [0.7, 0.4], "codes": ["A"], "y": [1, 0]},
    ]},
]


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


@pytest.fixture
def toy_files(tmp_path):
    write_jsonl(tmp_path / "patients.jsonl", PATIENTS)
    write_jsonl(tmp_path / "codes.jsonl", CODES)
    return tmp_path / "patients.jsonl", tmp_path / "codes.jsonl"


@pytest.fixture
def toy_cohort(toy_files):
    return load_cohort(*toy_files)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
