import random

import pytest

from fixedpoint_tools.errors import EmptyGroup, IoFailure, MissingLabels
from fixedpoint_tools.report import (
    CensusRow,
    ClassCensus,
    McRow,
    McSummaryRow,
    SaeRow,
    SummaryRow,
    aggregate,
    class_census,
    emit,
    mc_summary,
    prototype_row,
    read_census,
    read_json,
    read_rows,
    sae_rows,
)


def prediction(label, n_classes=3):
    dist = [0.1] * n_classes
    dist[label] = 1.0 - 0.1 * (n_classes - 1)
    return {"label": label, "distribution": dist}


def feature_trace(masks, labels, certified=True, outcome=None, **record):
    record.setdefault("dataset", "blobs")
    record.setdefault("explainer", "occlusion")
    record.setdefault("dim", 4)
    return {
        "kind": "feature",
        "states": masks,
        "outcome": outcome or {"type": "FixedPoint", "k": len(masks) - 2},
        "predictions": [prediction(y) for y in labels],
        "properties": {
            "tags": [], "matrix": [], "first_violation": None,
            "certified": certified, "terminal_satisfied": certified,
        },
        "record": record,
    }


def chain(steps):
    masks = [list(range(4 - min(i, 3))) for i in range(steps + 1)]
    return masks + [masks[-1]]


def test_aggregate_single_trace_has_zero_std():
    trace = feature_trace([[0, 1, 2, 3], [0, 1], [0, 1]], [0, 0, 0])
    (row,) = aggregate([trace])
    assert row.n_traces == 1
    assert row.steps_mean == 1.0 and row.steps_std == 0.0
    assert row.fixed_point_size_mean == 2.0 and row.fixed_point_size_std == 0.0
    assert row.jaccard_start_step1 == 0.5
    assert row.certified_pct == 100.0


def test_aggregate_mean_and_std():
    traces = [feature_trace(chain(3), [0] * 5), feature_trace(chain(5), [0] * 7)]
    (row,) = aggregate(traces)
    assert row.steps_mean == 4.0
    assert row.steps_std == 1.0
    assert (row.steps_min, row.steps_max) == (3, 5)


def test_aggregate_groups_and_counts_cycles():
    cycle = {"type": "Cycle", "entry": 1, "period": 2}
    traces = [
        feature_trace([[0, 1, 2, 3], [0, 1]], [0, 0], explainer="a"),
        feature_trace([[0, 1, 2, 3], [0], [1], [0]], [0, 0, 0, 0], certified=False,
                      outcome=cycle, explainer="b"),
    ]
    rows = aggregate(traces)
    assert [r.explainer for r in rows] == ["a", "b"]
    assert rows[1].converged_pct == 0.0
    assert rows[1].steps_mean == 3.0


def test_aggregate_is_permutation_invariant():
    rng = random.Random(0)
    traces = [
        feature_trace(chain(rng.randint(0, 6)), [0] * 9, certified=rng.random() < 0.5)
        for _ in range(40)
    ]
    for t in traces:
        t["predictions"] = t["predictions"][:len(t["states"])]
    expected = aggregate(traces)
    for _ in range(10):
        rng.shuffle(traces)
        assert aggregate(traces) == expected


def test_aggregate_empty():
    with pytest.raises(EmptyGroup):
        aggregate([])


def census_trace(true_label, labels, certified):
    masks = [[0, 1]] * len(labels)
    return feature_trace(masks, labels, certified=certified, true_label=true_label)


def test_census_all_certified():
    traces = [census_trace(c, [c, c], True) for c in range(3) for _ in range(2)]
    census = class_census(traces, 3)
    assert all(r.fixed_point_exists for r in census.rows)
    assert all(sum(r.distribution) == 0 for r in census.rows)
    assert [r.count_found for r in census.rows] == [2, 2, 2]


def test_census_records_where_uncertified_iterates_went():
    traces = [
        census_trace(0, [0, 0], True),
        census_trace(1, [1, 2, 2], False),
        census_trace(1, [0, 1], False),
        census_trace(2, [2, 2], True),
    ]
    census = class_census(traces, 3)
    row = census.rows[1]
    assert not row.fixed_point_exists
    assert row.distribution == (1, 0, 2)
    assert row.examined == 3
    assert census.rows[0].distribution == (0, 0, 0)


def test_census_needs_true_labels():
    with pytest.raises(MissingLabels):
        class_census([feature_trace([[0], [0]], [0, 0])])


def test_census_round_trip(tmp_path):
    census = ClassCensus(2, (CensusRow(0, True, 3, 0, (0, 0)), CensusRow(1, False, 0, 4, (4, 0))))
    path = str(tmp_path / "census.csv")
    emit(census, "csv", path)
    assert read_census(path) == census
    with open(path) as fp:
        header = fp.readline().strip()
    assert header == "class,fixed_point_exists,count_found,examined,label_0,label_1"


def test_rows_round_trip(tmp_path):
    rows = [
        SummaryRow("blobs", "occlusion", 4, 10, 1.5, 0.5, 30.0, 100.0, 2.2, 0.1, 1, 4, 0.75,
                   1.0 / 3.0),
        SummaryRow("grid", "gradient_input", 16, 3, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1, 1, 1.0, 1.0),
    ]
    path = str(tmp_path / "summary.csv")
    emit(rows, "csv", path)
    assert read_rows(path, SummaryRow) == rows
    json_path = str(tmp_path / "summary.json")
    emit(rows, "json", json_path)
    assert read_json(json_path)[0]["jaccard_start_fixed_point"] == 1.0 / 3.0


def test_keyword_column_is_renamed(tmp_path):
    path = str(tmp_path / "mc.csv")
    emit([McRow(0, 0.5, "ContractsToZero", 1e-9, 30)], "csv", path)
    with open(path) as fp:
        assert fp.readline().strip() == "seed,max_eig_norm,class,final_norm,steps"
    assert read_rows(path, McRow)[0].klass == "ContractsToZero"


def test_empty_table_is_header_only(tmp_path):
    path = str(tmp_path / "empty.csv")
    emit([], "csv", path, row_type=SaeRow)
    with open(path) as fp:
        assert fp.read().count("\n") == 1
    assert read_rows(path, SaeRow) == []
    with pytest.raises(ValueError):
        emit([], "csv", path)


def test_emit_is_byte_stable(tmp_path):
    rows = [McSummaryRow("contractive", 3, 100.0, 0.0, 0.0, 0.0)]
    contents = []
    for name in ("a.csv", "b.csv"):
        emit(rows, "csv", str(tmp_path / name))
        contents.append((tmp_path / name).read_bytes())
    assert contents[0] == contents[1]


def test_emit_reports_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        emit([McSummaryRow("g", 1, 0.0, 0.0, 0.0, 100.0)], "csv", str(tmp_path))


def sae_trace(true_label, labels, active):
    return {
        "kind": "sae",
        "states": [[0.0]] * len(labels),
        "outcome": {"type": "FixedPoint", "k": len(labels) - 2},
        "predictions": [prediction(y) for y in labels],
        "active": active,
        "record": {"true_label": true_label},
    }


def test_sae_rows():
    traces = [
        sae_trace(0, [0, 1, 1, 1], [[0, 1], [1, 2], [1, 2], [1, 2]]),
        sae_trace(2, [2, 2, 2], [[3], [3], [3]]),
    ]
    rows = {r.setting: r for r in sae_rows(traces)}
    assert rows["base"].jaccard_start == 1.0
    assert rows["base"].correctness_pct == 100.0
    assert rows["single"].correctness_pct == 50.0
    assert rows["single"].correctness_top3_pct == 100.0
    assert rows["constant"].iterations_mean == 2.5
    assert rows["constant"].jaccard_step1 == 1.0
    assert all(r.n_converged == 2 for r in rows.values())
    with pytest.raises(MissingLabels):
        sae_rows([dict(traces[0], record={})])


def test_sae_constant_row_skips_unconverged_traces():
    diverged = dict(
        sae_trace(1, [1, 0, 0], [[0], [4], [5]]),
        outcome={"type": "Diverged", "step": 2, "norm": 1e7},
    )
    traces = [sae_trace(2, [2, 2, 2], [[3], [3], [3]]), diverged]
    rows = {r.setting: r for r in sae_rows(traces)}
    assert rows["single"].n_traces == 2
    assert rows["single"].correctness_pct == 50.0
    assert rows["constant"].n_traces == 1
    assert rows["constant"].n_converged == 1
    assert rows["constant"].correctness_pct == 100.0
    assert rows["constant"].jaccard_start == 1.0

    rows = {r.setting: r for r in sae_rows([diverged])}
    assert rows["constant"].n_traces == 0
    assert rows["constant"].correctness_pct == 0.0
    assert rows["constant"].jaccard_start == 0.0
    assert rows["base"].n_converged == 0


def test_aggregate_fixed_point_jaccard_ignores_unconverged_traces():
    cycle = {"type": "Cycle", "entry": 1, "period": 2}
    traces = [
        feature_trace([[0, 1, 2, 3], [0, 1], [0, 1]], [0, 0, 0]),
        feature_trace([[0, 1, 2, 3], [0], [1], [0]], [0, 0, 0, 0], certified=False,
                      outcome=cycle),
    ]
    (row,) = aggregate(traces)
    assert row.jaccard_start_fixed_point == 0.5
    assert row.converged_pct == 50.0


def test_mc_summary():
    rows = [McRow(i, 0.5, "ContractsToZero", 0.0, 10) for i in range(3)]
    rows.append(McRow(3, 1.5, "Diverges", 1e7, 20))
    summary = mc_summary("mixed", rows)
    assert summary.count == 4
    assert summary.contracts_pct == 75.0
    assert summary.diverges_pct == 25.0
    with pytest.raises(EmptyGroup):
        mc_summary("none", [])


def proto_trace(origin, states, labels, outcome):
    return {
        "kind": "prototype",
        "states": states,
        "outcome": outcome,
        "predictions": [prediction(y) for y in labels],
        "record": {"origin": origin},
    }


def test_prototype_row():
    traces = [
        proto_trace("prototype", [0, 0], [0, 0], {"type": "FixedPoint", "k": 0}),
        proto_trace("prototype", [1, 2, 1], [1, 0, 1], {"type": "Cycle", "entry": 0, "period": 2}),
        proto_trace("input", [1, 1], [1, 1], {"type": "FixedPoint", "k": 0}),
        proto_trace("input", [2, 1, 2], [0, 1, 0], {"type": "Cycle", "entry": 0, "period": 2}),
    ]
    row = prototype_row("blobs", 3, True, 0.9, 2 / 3, traces)
    assert row.class_preserved_s == 0.5
    assert row.class_preserved_x == 0.5
    assert (row.steps_min, row.steps_mean, row.steps_max) == (0, 1.0, 2)
    assert row.exclude_self is True
