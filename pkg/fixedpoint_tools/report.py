"""Aggregate trace JSON into summary tables and write them as CSV or JSON.

Every aggregation works on trace blobs as written by `engine.trace_to_json`,
so the `report` subcommand can re-aggregate from files on disk.

Standard deviations are population standard deviations.
"""
import csv
import io
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Tuple

import numpy as np
import rapidjson as json
import tenacity

from .errors import EmptyGroup, IoFailure, MissingLabels
from .explain_sae import jaccard_active
from .utils import format_float, mean_std

FORMATS = ["csv", "json"]
SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "schemas", "trace.schema.json")


@dataclass(frozen=True)
class SummaryRow:
    dataset: str
    explainer: str
    d: int
    n_traces: int
    fixed_point_size_mean: float
    fixed_point_size_std: float
    certified_pct: float
    converged_pct: float
    steps_mean: float
    steps_std: float
    steps_min: int
    steps_max: int
    jaccard_start_step1: float
    jaccard_start_fixed_point: float


@dataclass(frozen=True)
class PrototypeRow:
    dataset: str
    n_prototypes: int
    exclude_self: bool
    accuracy: float
    self_consistency: float
    class_preserved_s: float
    class_preserved_x: float
    steps_min: int
    steps_mean: float
    steps_max: int


@dataclass(frozen=True)
class SaeRow:
    setting: str
    n_traces: int
    iterations_mean: float
    iterations_std: float
    correctness_pct: float
    correctness_top3_pct: float
    jaccard_start: float
    jaccard_step1: float
    n_converged: int


@dataclass(frozen=True)
class McRow:
    seed: int
    max_eig_norm: float
    klass: str
    final_norm: float
    steps: int


@dataclass(frozen=True)
class McSummaryRow:
    group: str
    count: int
    contracts_pct: float
    converges_pct: float
    bounded_pct: float
    diverges_pct: float


@dataclass(frozen=True)
class CensusRow:
    klass: int
    fixed_point_exists: bool
    count_found: int
    examined: int
    distribution: Tuple[int, ...]


@dataclass(frozen=True)
class ClassCensus:
    n_classes: int
    rows: Tuple[CensusRow, ...]

    def to_json(self):
        return {"n_classes": self.n_classes, "rows": [asdict(r) for r in self.rows]}


# CSV column names that are Python keywords
CSV_NAMES = {"klass": "class"}

SAE_SETTINGS = ["base", "single", "double", "constant"]


def _steps(trace):
    outcome = trace["outcome"]
    if outcome["type"] == "Cycle":
        return outcome["entry"] + outcome["period"]
    if outcome.get("k") is not None:
        return outcome["k"]
    return len(trace["states"]) - 1


def _state_set(trace, i):
    if trace["kind"] == "feature":
        return set(trace["states"][i])
    if trace["kind"] == "prototype":
        return {trace["states"][i]}
    return set(trace["active"][i])


def _certified(trace):
    props = trace.get("properties")
    return bool(props and props["certified"])


def _pct(flags):
    flags = list(flags)
    return 100.0 * sum(1 for f in flags if f) / len(flags) if flags else 0.0


def aggregate(traces, keys=("dataset", "explainer")):
    """One SummaryRow per group of traces sharing record[key] for `keys`."""
    if not traces:
        raise EmptyGroup("no traces to aggregate")
    groups = defaultdict(list)
    for trace in traces:
        groups[tuple(str(trace["record"].get(k, "")) for k in keys)].append(trace)

    rows = []
    for group_key in sorted(groups):
        members = groups[group_key]
        named = dict(zip(keys, group_key))
        converged = [t for t in members if t["outcome"]["type"] == "FixedPoint"]
        size_mean, size_std = mean_std(len(_state_set(t, -1)) for t in converged)
        steps = [_steps(t) for t in members]
        steps_mean, steps_std = mean_std(steps)
        step1, _ = mean_std(
            jaccard_active(_state_set(t, 0), _state_set(t, min(1, len(t["states"]) - 1)))
            for t in members
        )
        final, _ = mean_std(
            jaccard_active(_state_set(t, 0), _state_set(t, -1)) for t in converged
        )
        rows.append(SummaryRow(
            dataset=named.get("dataset", ""),
            explainer=named.get("explainer", ""),
            d=int(members[0]["record"].get("dim", 0)),
            n_traces=len(members),
            fixed_point_size_mean=size_mean,
            fixed_point_size_std=size_std,
            certified_pct=_pct(_certified(t) for t in members),
            converged_pct=_pct(t["outcome"]["type"] == "FixedPoint" for t in members),
            steps_mean=steps_mean,
            steps_std=steps_std,
            steps_min=min(steps),
            steps_max=max(steps),
            jaccard_start_step1=step1,
            jaccard_start_fixed_point=final,
        ))
    return rows


def _labels(trace):
    return [p["label"] for p in trace["predictions"] if p is not None]


def class_preserved(trace):
    """True when every iterate keeps the label of the first one."""
    labels = _labels(trace)
    return len(labels) == len(trace["predictions"]) and len(set(labels)) == 1


def prototype_row(dataset, n_prototypes, exclude_self, accuracy, self_consistency, traces):
    """Table row for one prototype system and self-reference mode.

    `traces` mixes recursions started from prototypes (record origin
    "prototype") and from inputs (origin "input").
    """
    from_s = [t for t in traces if t["record"].get("origin") == "prototype"]
    from_x = [t for t in traces if t["record"].get("origin") == "input"]
    if not from_s and not from_x:
        raise EmptyGroup(f"no prototype traces for {dataset} / {n_prototypes}")
    steps = [_steps(t) for t in from_x] or [0]
    steps_mean, _ = mean_std(steps)
    return PrototypeRow(
        dataset=dataset,
        n_prototypes=int(n_prototypes),
        exclude_self=bool(exclude_self),
        accuracy=float(accuracy),
        self_consistency=float(self_consistency),
        class_preserved_s=_pct(class_preserved(t) for t in from_s) / 100.0,
        class_preserved_x=_pct(class_preserved(t) for t in from_x) / 100.0,
        steps_min=min(steps),
        steps_mean=steps_mean,
        steps_max=max(steps),
    )


def _top(distribution, k):
    order = np.argsort(-np.asarray(distribution), kind="stable")
    return [int(i) for i in order[:k]]


def _setting_index(trace, setting):
    last = len(trace["states"]) - 1
    if setting == "base":
        return 0
    if setting == "single":
        return min(1, last)
    if setting == "double":
        return min(2, last)
    return last


def sae_rows(traces):
    """base / single / double / constant rows of the SAE recursion table.

    Row `s` reads the iterate reached after 0, 1, 2 or all SAE applications:
    its patched label against the true label, and the Jaccard similarity of
    its top-k active set with the sets at the start and after one step.
    The constant row only reads traces that reached a fixed point; it is all
    zeros when none did.
    """
    if not traces:
        raise EmptyGroup("no sae traces")
    if any("true_label" not in t["record"] for t in traces):
        raise MissingLabels("sae rows need record.true_label on every trace")
    converged = [t for t in traces if t["outcome"]["type"] == "FixedPoint"]
    rows = []
    for setting in SAE_SETTINGS:
        members = converged if setting == "constant" else traces
        iterations, correct, top3, j_start, j_step1 = [], [], [], [], []
        for t in members:
            i = _setting_index(t, setting)
            iterations.append(i)
            y = t["record"]["true_label"]
            pred = t["predictions"][i]
            correct.append(pred is not None and pred["label"] == y)
            top3.append(pred is not None and y in _top(pred["distribution"], 3))
            active = t["active"]
            j_start.append(jaccard_active(active[0], active[i]))
            j_step1.append(jaccard_active(active[min(1, len(active) - 1)], active[i]))
        it_mean, it_std = mean_std(iterations)
        rows.append(SaeRow(
            setting=setting,
            n_traces=len(members),
            iterations_mean=it_mean,
            iterations_std=it_std,
            correctness_pct=_pct(correct),
            correctness_top3_pct=_pct(top3),
            jaccard_start=mean_std(j_start)[0],
            jaccard_step1=mean_std(j_step1)[0],
            n_converged=len(converged),
        ))
    return rows


def mc_summary(group, rows):
    if not rows:
        raise EmptyGroup(f"no matrices in group {group}")
    tags = [r.klass for r in rows]
    return McSummaryRow(
        group=group,
        count=len(rows),
        contracts_pct=_pct(t == "ContractsToZero" for t in tags),
        converges_pct=_pct(t == "ConvergesNonzeroFixedPoint" for t in tags),
        bounded_pct=_pct(t == "BoundedNonConvergent" for t in tags),
        diverges_pct=_pct(t == "Diverges" for t in tags),
    )


def class_census(traces, n_classes=None):
    """Per true class: whether any trace certified, and for classes where none
    did, which labels the failing iterates were given."""
    if any("true_label" not in t["record"] for t in traces):
        raise MissingLabels("class census needs record.true_label on every trace")
    if n_classes is None:
        n_classes = max(
            [len(p["distribution"]) for t in traces for p in t["predictions"] if p]
            + [t["record"]["true_label"] + 1 for t in traces]
            + [0]
        )
    by_class = defaultdict(list)
    for t in traces:
        by_class[int(t["record"]["true_label"])].append(t)

    rows = []
    for klass in range(n_classes):
        members = by_class.get(klass, [])
        found = sum(1 for t in members if _certified(t))
        distribution = [0] * n_classes
        if found == 0:
            for t in members:
                for label in _labels(t):
                    if label != klass:
                        distribution[label] += 1
        rows.append(CensusRow(klass, found > 0, found, sum(distribution), tuple(distribution)))
    return ClassCensus(n_classes, tuple(rows))


# serialization


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def _parse_value(text, kind):
    if kind is bool:
        return text == "true"
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def rows_to_csv(rows, row_type):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(row_type)]
    writer.writerow([CSV_NAMES.get(n, n) for n in names])
    for row in rows:
        writer.writerow([_format_value(getattr(row, n)) for n in names])
    return buf.getvalue()


def census_to_csv(census):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["class", "fixed_point_exists", "count_found", "examined"]
        + [f"label_{i}" for i in range(census.n_classes)]
    )
    for r in census.rows:
        writer.writerow(
            [r.klass, _format_value(r.fixed_point_exists), r.count_found, r.examined]
            + list(r.distribution)
        )
    return buf.getvalue()


def _to_plain(obj):
    if isinstance(obj, ClassCensus):
        return obj.to_json()
    if isinstance(obj, (list, tuple)):
        return [_to_plain(o) for o in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj


@tenacity.retry(
    stop=tenacity.stop_after_attempt(3),
    retry=tenacity.retry_if_exception_type(OSError),
    reraise=True,
)
def _write_text(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fp:
        fp.write(text)


def emit(obj, fmt, path, row_type=None):
    """Write rows, a census or a trace blob to `path` as csv or json.

    For csv, `row_type` names the row dataclass; it is taken from the first
    row when omitted and is required for an empty list.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format '{fmt}'")
    if fmt == "csv":
        if isinstance(obj, ClassCensus):
            text = census_to_csv(obj)
        else:
            if row_type is None:
                if not obj:
                    raise ValueError("row_type is required to write an empty table")
                row_type = type(obj[0])
            text = rows_to_csv(obj, row_type)
    else:
        text = json.dumps(_to_plain(obj), indent=2) + "\n"
    try:
        _write_text(path, text)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")


def read_rows(path, row_type):
    with open(path, "r", newline="") as fp:
        rows = list(csv.reader(fp))
    names = [f.name for f in fields(row_type)]
    if rows[0] != [CSV_NAMES.get(n, n) for n in names]:
        raise ValueError(f"{path}: header does not match {row_type.__name__}")
    kinds = [f.type for f in fields(row_type)]
    return [
        row_type(*(_parse_value(v, k) for v, k in zip(r, kinds))) for r in rows[1:] if r
    ]


def read_census(path):
    with open(path, "r", newline="") as fp:
        rows = list(csv.reader(fp))
    n_classes = len(rows[0]) - 4
    parsed = []
    for r in rows[1:]:
        if not r:
            continue
        parsed.append(CensusRow(
            int(r[0]), r[1] == "true", int(r[2]), int(r[3]), tuple(int(v) for v in r[4:]),
        ))
    return ClassCensus(n_classes, tuple(parsed))


def read_json(path):
    with open(path, "r") as fp:
        return json.load(fp)


def load_trace_schema():
    return read_json(SCHEMA_PATH)


_JSON_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "null": type(None),
}


def _is_type(value, name):
    if name == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if name == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, _JSON_TYPES[name])


def schema_errors(blob, schema=None, where="$"):
    """Mismatches between `blob` and the subset of JSON schema the trace schema
    uses (type, enum, required, properties, items, minimum)."""
    schema = load_trace_schema() if schema is None else schema
    errors = []
    types = schema.get("type")
    if types is not None:
        types = [types] if isinstance(types, str) else types
        if not any(_is_type(blob, t) for t in types):
            return [f"{where}: expected {'|'.join(types)}"]
    if "enum" in schema and blob not in schema["enum"]:
        errors.append(f"{where}: {blob!r} not in {schema['enum']}")
    if "minimum" in schema and _is_type(blob, "number") and blob < schema["minimum"]:
        errors.append(f"{where}: {blob} below {schema['minimum']}")
    if isinstance(blob, dict):
        for key in schema.get("required", []):
            if key not in blob:
                errors.append(f"{where}: missing '{key}'")
        for key, sub in schema.get("properties", {}).items():
            if key in blob:
                errors.extend(schema_errors(blob[key], sub, f"{where}.{key}"))
    if isinstance(blob, list) and "items" in schema:
        for i, item in enumerate(blob):
            errors.extend(schema_errors(item, schema["items"], f"{where}[{i}]"))
    return errors
