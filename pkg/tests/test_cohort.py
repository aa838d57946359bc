import copy
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from medgraph import cohort as co
from medgraph.synth import GenConfig, generate

from conftest import CODES, PATIENTS, write_jsonl


def test_fixture_counts(toy_cohort):
    g = toy_cohort.graph
    assert (len(g.visits), len(g.codes), len(g.edges)) == (4, 3, 7)
    assert toy_cohort.dims == (2, 3, 2)
    assert sum(len(v.codes) for v in g.visits) == len(g.edges)
    assert [v.id for v in g.visits] == ["v1", "v2", "v3", "v4"]


def test_edges_are_union_of_code_sets(toy_cohort):
    g = toy_cohort.graph
    expected = {(v.index, c) for v in g.visits for c in v.codes}
    assert set(map(tuple, g.edges.tolist())) == expected
    assert len(expected) == len(g.edges)


def test_dangling_code_is_named(tmp_path):
    pats = copy.deepcopy(PATIENTS)
    pats[0]["visits"][1]["codes"].append("X99")
    write_jsonl(tmp_path / "p.jsonl", pats)
    write_jsonl(tmp_path / "c.jsonl", CODES)
    with pytest.raises(co.DanglingCodeError, match="X99"):
        co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")


def test_single_visit_patient_dropped(tmp_path, caplog):
    pats = copy.deepcopy(PATIENTS) + [{"patient_id": "p3", "visits": [
        {"visit_id": "v5", "t": 1.0, "x": [0.0, 0.0], "codes": ["A"]}]}]
    write_jsonl(tmp_path / "p.jsonl", pats)
    write_jsonl(tmp_path / "c.jsonl", CODES)
    with caplog.at_level(logging.WARNING):
        c = co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")
    assert [p.patient_id for p in c.patients] == ["p1", "p2"]
    assert "p3" in caplog.text


def test_parse_error_has_line_number(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"code_id": "A", "x": [1]}\n{"code_id": oops}\n')
    write_jsonl(tmp_path / "p.jsonl", [])
    with pytest.raises(co.CohortParseError) as err:
        co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")
    assert err.value.line == 2


def test_dimension_and_timestamp_errors(tmp_path):
    pats = copy.deepcopy(PATIENTS)
    pats[1]["visits"][1]["x"] = [1.0, 2.0, 3.0]
    write_jsonl(tmp_path / "p.jsonl", pats)
    write_jsonl(tmp_path / "c.jsonl", CODES)
    with pytest.raises(co.DimensionError):
        co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")

    pats = copy.deepcopy(PATIENTS)
    pats[0]["visits"][0]["t"] = 9.0  # after the second visit at t=7
    write_jsonl(tmp_path / "p.jsonl", pats)
    with pytest.raises(co.TimestampError, match="precedes"):
        co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")


def test_empty_code_set_rejected(tmp_path):
    pats = copy.deepcopy(PATIENTS)
    pats[0]["visits"][0]["codes"] = []
    write_jsonl(tmp_path / "p.jsonl", pats)
    write_jsonl(tmp_path / "c.jsonl", CODES)
    with pytest.raises(co.CohortError, match="no codes"):
        co.load_cohort(tmp_path / "p.jsonl", tmp_path / "c.jsonl")


def _seq(times):
    visits = tuple(co.Visit(f"v{i}", i, float(t), np.zeros(1), (0,)) for i, t in enumerate(times))
    return co.PatientSequence("p", visits)


def test_time_gaps():
    np.testing.assert_array_equal(co.time_gaps(_seq([0, 7, 37])), [7, 30])
    np.testing.assert_array_equal(co.time_gaps(_seq([5, 5])), [0])
    with pytest.raises(co.TimestampError):
        co.time_gaps(_seq([3, 1]))


@given(st.lists(st.floats(0, 1e4), min_size=2, max_size=30))
def test_time_gaps_sum_to_span(ts):
    ts = sorted(ts)
    gaps = co.time_gaps(_seq(ts))
    assert (gaps >= 0).all()
    assert gaps.sum() == pytest.approx(ts[-1] - ts[0], abs=1e-9)


def test_stats(toy_cohort):
    s = co.cohort_stats(toy_cohort)
    assert (s.patients, s.visits, s.avg_visits_per_patient) == (2, 4, 2.0)
    assert (s.unique_codes, s.max_codes_per_visit) == (3, 3)
    assert s.avg_codes_per_visit == 7 / 4
    empty = co.Cohort((), toy_cohort.graph, toy_cohort.dims)
    assert co.cohort_stats(empty) == co.StatsReport()


def test_stats_on_generated_cohort():
    cfg = GenConfig(n_patients=100, seed=3)
    s = co.cohort_stats(generate(cfg))
    assert s.patients == 100
    assert abs(s.avg_codes_per_visit - cfg.mean_codes) <= 0.2 * cfg.mean_codes


def test_round_trip_and_purity(toy_files, toy_cohort, tmp_path):
    again = co.load_cohort(*toy_files)
    assert again == toy_cohort
    assert co.cohort_stats(again) == co.cohort_stats(toy_cohort)
    co.save_cohort(toy_cohort, tmp_path / "out")
    assert co.load_cohort_dir(tmp_path / "out") == toy_cohort


def test_round_trip_generated_bytes(tmp_path):
    c = generate(GenConfig(n_patients=30, n_codes=40, seed=5))
    co.save_cohort(c, tmp_path / "a")
    back = co.load_cohort_dir(tmp_path / "a")
    assert back == c
    co.save_cohort(back, tmp_path / "b")
    for name in ("patients.jsonl", "codes.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_identity_code_attributes(toy_cohort):
    c = co.with_identity_code_attributes(toy_cohort)
    np.testing.assert_array_equal(c.graph.code_attributes, np.eye(3))
    assert c.dims == (2, 3, 2)
    np.testing.assert_array_equal(c.graph.edges, toy_cohort.graph.edges)


def test_dict_labels_keep_task_names(toy_cohort):
    assert toy_cohort.tasks() == {co.DEFAULT_TASK}
    assert toy_cohort.visits[0].label(co.DEFAULT_TASK) == (1, 0)
    c = generate(GenConfig(n_patients=5, n_codes=20, seed=1))
    assert c.tasks() == {"readmit30", "mortality"}
