"""Experiment pipelines behind the CLI: feature, proto, sae and linear_mc.

Each pipeline writes into the configured output directory:

    manifest.json       config hash, seeds and versions
    traces/             one JSON blob (or list of blobs) per trace group
    summary.csv         SummaryRow table
    <kind tables>       census.csv, prototypes.csv, sae.csv, linear_mc*.csv

Nothing written depends on wall-clock time or on the number of jobs.
"""
import glob
import os
import platform
from contextlib import contextmanager

import joblib
import numpy as np
import tqdm

from . import report
from .engine import (
    PropertyContext,
    build_suite,
    certify_up_to_infinity,
    evaluate_properties,
    feature_start,
    feature_step,
    prototype_step,
    run_recursion,
    sae_recursion_step,
    trace_to_json,
)
from .errors import FixedPointError, InputFileError, TooManyPatterns
from .explain_proto import (
    build_digraph,
    classify_by_prototype,
    components_have_one_cycle,
    count_components,
    explain_input,
    fit_prototype_system,
    read_prototypes,
    self_consistency_report,
    with_prototypes,
    write_prototypes,
)
from .explain_sae import (
    classify_linear_dynamics,
    harvest_hidden,
    load_sae,
    nonlinear_fixed_point_bruteforce,
    save_sae,
    train_sae,
)
from .linalg import make_matrix_with_spectrum
from .metadata import HEAD, SCHEMA_VERSION, VERSION
from .models import generate_synthetic, hidden_activation, read_dataset, train
from .utils import compute_config_hash, derive_seed, timer


@contextmanager
def phase(name):
    """Time a pipeline phase and tag errors raised inside it with its name."""
    try:
        with timer(HEAD, name):
            yield
    except (FixedPointError, KeyError, OSError, ValueError) as e:
        if not hasattr(e, "phase"):
            e.phase = name
        raise


def _parallel(jobs, n_jobs, desc):
    return joblib.Parallel(n_jobs=n_jobs, backend="threading", verbose=0)(
        tqdm.tqdm(jobs, desc=desc)
    )


def load_dataset(cfg):
    ds = cfg.dataset
    if ds["kind"] == "csv":
        return read_dataset(ds["path"], n_classes=ds["classes"])
    spec = {k: ds[k] for k in ("kind", "classes", "dim", "per_class", "noise")}
    spec["seed"] = derive_seed(cfg.seed, "dataset")
    return generate_synthetic(spec)


def train_model(cfg, dataset, architecture=None):
    params = dict(cfg.model)
    if architecture is not None:
        params["architecture"] = architecture
    params["seed"] = derive_seed(cfg.seed, "model")
    return train(dataset, params)


def pick_inputs(cfg, dataset, n_inputs):
    """Seeded choice of input indices, returned in increasing order."""
    n = min(n_inputs, len(dataset))
    rng = np.random.default_rng(derive_seed(cfg.seed, "inputs"))
    return sorted(int(i) for i in rng.choice(len(dataset), size=n, replace=False))


def write_manifest(cfg, extra=None):
    manifest = {
        "experiment": cfg.experiment,
        "schema_version": SCHEMA_VERSION,
        "config_hash": compute_config_hash(cfg.as_dict()),
        "seed": cfg.seed,
        "seeds": {
            "dataset": derive_seed(cfg.seed, "dataset"),
            "model": derive_seed(cfg.seed, "model"),
            "inputs": derive_seed(cfg.seed, "inputs"),
        },
        "versions": {
            "fixedpoint_tools": VERSION,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "config": cfg.as_dict(),
    }
    manifest.update(extra or {})
    report.emit(manifest, "json", os.path.join(cfg.out_dir, "manifest.json"))
    return manifest


def _rule(explainer):
    if explainer["rule"] == "topk":
        return {"kind": "topk", "k": explainer["k"]}
    return {"kind": "threshold", "tau": explainer["threshold"]}


def _trace_blob(trace, step, suite, context, record):
    """Evaluate properties, re-check certified traces after extra applications
    and serialize."""
    prop_report = evaluate_properties(trace, suite, context)
    trace.record.update(record)
    trace.record["certified_after_extra"] = (
        certify_up_to_infinity(trace, step, suite, context) if prop_report.certified else None
    )
    return trace_to_json(trace, step, prop_report)


def _feature_trace(cfg, model, dataset, index, suite):
    x0 = dataset.inputs[index]
    ex = cfg.explainer
    step = feature_step(model, x0, ex["scorer"], _rule(ex), ex["max_remove_fraction"])
    trace = run_recursion(step, feature_start(x0), cfg.budget)
    context = PropertyContext(
        step=step,
        ground_truth=int(dataset.labels[index]),
        seed=derive_seed(cfg.seed, "trace", index),
    )
    return _trace_blob(trace, step, suite, context, {
        "index": index,
        "dataset": cfg.dataset["kind"],
        "explainer": f"{ex['scorer']}/{ex['rule']}",
        "dim": dataset.dim,
        "true_label": int(dataset.labels[index]),
    })


def run_feature(cfg):
    out = cfg.out_dir
    with phase("building dataset and model"):
        dataset = load_dataset(cfg)
        model = train_model(cfg, dataset)
    suite = build_suite(cfg.properties)
    indices = pick_inputs(cfg, dataset, cfg.dataset["n_inputs"])

    with phase("running feature recursions"):
        jobs = [
            joblib.delayed(_feature_trace)(cfg, model, dataset, i, suite) for i in indices
        ]
        blobs = _parallel(jobs, cfg.jobs, "feature traces")

    with phase("writing results"):
        for blob in blobs:
            name = f"feature_{blob['record']['index']:05d}.json"
            report.emit(blob, "json", os.path.join(out, "traces", name))
        report.emit(report.aggregate(blobs), "csv", os.path.join(out, "summary.csv"))
        census = report.class_census(blobs, n_classes=dataset.n_classes)
        report.emit(census, "csv", os.path.join(out, "census.csv"))
        write_manifest(cfg)
    return blobs


def load_prototype_systems(cfg, dataset):
    protos = cfg.prototypes
    systems = []
    if protos["path"] is not None:
        latents, classes = read_prototypes(protos["path"])
        if len(latents) < 2:
            raise InputFileError(protos["path"], "a prototype system needs at least 2 prototypes")
        fitted = fit_prototype_system(
            dataset, len(latents), latents.shape[1], protos["ridge"], protos["jitter"],
            derive_seed(cfg.seed, "prototypes", len(latents)),
        )
        try:
            systems.append(with_prototypes(fitted, latents, classes))
        except ValueError as e:
            raise InputFileError(protos["path"], str(e))
        return systems
    for size in protos["sizes"]:
        systems.append(fit_prototype_system(
            dataset, size, protos["latent_dim"], protos["ridge"], protos["jitter"],
            derive_seed(cfg.seed, "prototypes", size),
        ))
    return systems


def _proto_trace(cfg, system, exclude_self, origin, index, start, ground_truth, suite):
    step = prototype_step(system, exclude_self)
    trace = run_recursion(step, start, cfg.budget)
    context = PropertyContext(
        step=step,
        ground_truth=ground_truth,
        seed=derive_seed(cfg.seed, "trace", len(system), origin, index),
    )
    mode = "exclude_self" if exclude_self else "self"
    return _trace_blob(trace, step, suite, context, {
        "index": index,
        "origin": origin,
        "dataset": cfg.dataset["kind"],
        "explainer": f"prototype-{len(system)}-{mode}",
        "dim": len(system),
        "exclude_self": exclude_self,
        "true_label": ground_truth,
    })


def run_proto(cfg):
    out = cfg.out_dir
    with phase("building dataset"):
        dataset = load_dataset(cfg)
    with phase("fitting prototype systems"):
        systems = load_prototype_systems(cfg, dataset)
    suite = build_suite(cfg.properties)
    indices = pick_inputs(cfg, dataset, cfg.prototypes["n_inputs"])

    rows, all_blobs, graphs = [], [], {}
    for system in systems:
        size = len(system)
        with phase(f"prototype system of size {size}"):
            accuracy = float(np.mean([
                classify_by_prototype(system, x) == y
                for x, y in zip(dataset.inputs, dataset.labels)
            ]))
            consistency = self_consistency_report(system)["fraction"]
            write_prototypes(os.path.join(out, f"prototypes_{size}.csv"), system)
            for exclude_self in (False, True):
                mode = "exclude_self" if exclude_self else "self"
                outcome = build_digraph(system, exclude_self)
                graphs[f"{size}/{mode}"] = dict(
                    outcome.to_json(),
                    one_cycle_per_component=components_have_one_cycle(outcome),
                    n_components=count_components(outcome),
                )
                jobs = [
                    joblib.delayed(_proto_trace)(
                        cfg, system, exclude_self, "prototype", p, p, int(system.classes[p]), suite
                    )
                    for p in range(size)
                ] + [
                    joblib.delayed(_proto_trace)(
                        cfg, system, exclude_self, "input", i,
                        explain_input(system, dataset.inputs[i]), int(dataset.labels[i]), suite,
                    )
                    for i in indices
                ]
                blobs = _parallel(jobs, cfg.jobs, f"prototype traces {size}/{mode}")
                report.emit(blobs, "json", os.path.join(out, "traces", f"proto_{size}_{mode}.json"))
                rows.append(report.prototype_row(
                    cfg.dataset["kind"], size, exclude_self, accuracy, consistency, blobs
                ))
                all_blobs.extend(blobs)

    with phase("writing results"):
        report.emit(rows, "csv", os.path.join(out, "prototypes.csv"), row_type=report.PrototypeRow)
        report.emit(graphs, "json", os.path.join(out, "digraphs.json"))
        report.emit(report.aggregate(all_blobs), "csv", os.path.join(out, "summary.csv"))
        write_manifest(cfg)
    return rows


def _sae_suite(cfg):
    specs = list(cfg.properties)
    if not any(s.get("tag") == "DistributionClose" for s in specs):
        specs.append({"tag": "DistributionClose", "tau": cfg.sae["tau_dist"]})
    return build_suite(specs)


def _sae_trace(cfg, model, sae, dataset, index, suite):
    x0 = dataset.inputs[index]
    step = sae_recursion_step(sae, model, x0, cfg.sae["conv_tol"], cfg.sae["divergence_tol"])
    trace = run_recursion(step, hidden_activation(model, x0), cfg.budget)
    context = PropertyContext(
        step=step,
        ground_truth=int(dataset.labels[index]),
        seed=derive_seed(cfg.seed, "trace", index),
    )
    return _trace_blob(trace, step, suite, context, {
        "index": index,
        "dataset": cfg.dataset["kind"],
        "explainer": f"sae-{sae.nonlinearity}-{sae.k}",
        "dim": sae.width,
        "true_label": int(dataset.labels[index]),
    })


def run_sae(cfg):
    out = cfg.out_dir
    params = cfg.sae
    with phase("building dataset and model"):
        dataset = load_dataset(cfg)
        model = train_model(cfg, dataset, architecture="mlp1")
    with phase("fitting sparse autoencoder"):
        if params["path"] is not None:
            sae = load_sae(params["path"])
        else:
            sae = train_sae(
                harvest_hidden(model, dataset.inputs), params["width"], params["k"],
                params["nonlinearity"], params["epochs"], params["lr"],
                derive_seed(cfg.seed, "sae"),
            )
        save_sae(os.path.join(out, "sae"), sae)

    with phase("classifying top-k pattern dynamics"):
        try:
            brute = nonlinear_fixed_point_bruteforce(sae, seed=derive_seed(cfg.seed, "dynamics"))
            dynamics = {
                "verdict": brute["verdict"],
                "all_contract": brute["all_contract"],
                "n_patterns": len(brute["patterns"]),
            }
        except TooManyPatterns as e:
            print(HEAD + f"skipping pattern enumeration: {e}", flush=True)
            dynamics = {"verdict": None, "all_contract": None, "skipped": str(e)}

    suite = _sae_suite(cfg)
    indices = pick_inputs(cfg, dataset, cfg.dataset["n_inputs"])
    with phase("running sae recursions"):
        jobs = [joblib.delayed(_sae_trace)(cfg, model, sae, dataset, i, suite) for i in indices]
        blobs = _parallel(jobs, cfg.jobs, "sae traces")

    with phase("writing results"):
        for blob in blobs:
            name = f"sae_{blob['record']['index']:05d}.json"
            report.emit(blob, "json", os.path.join(out, "traces", name))
        report.emit(report.sae_rows(blobs), "csv", os.path.join(out, "sae.csv"))
        report.emit(report.aggregate(blobs), "csv", os.path.join(out, "summary.csv"))
        report.emit(dynamics, "json", os.path.join(out, "dynamics.json"))
        write_manifest(cfg)
    return blobs


def draw_spectrum(rng, dim, norm_range, low, expansive, complex_pairs):
    """Eigen norms for one Monte Carlo matrix, sorted descending.

    Contractive spectra are uniform on `norm_range`. Expansive spectra draw
    the largest norm from `norm_range` and the rest from [low, largest].
    The first `complex_pairs` pairs are made equal to become complex pairs.
    """
    if expansive:
        top = rng.uniform(*norm_range)
        norms = np.concatenate([[top], rng.uniform(low, top, size=dim - 1)])
    else:
        norms = rng.uniform(*norm_range, size=dim)
    norms = np.sort(norms)[::-1]
    for pair in range(complex_pairs):
        norms[2 * pair + 1] = norms[2 * pair]
    return norms


def _mc_matrix(mc, group, seed):
    rng = np.random.default_rng(seed)
    norms = draw_spectrum(
        rng, mc["dim"], mc[f"{group}_range"], mc["contractive_range"][0],
        group == "expansive", mc["complex_pairs"],
    )
    m = make_matrix_with_spectrum(mc["dim"], norms, seed, complex_pairs=mc["complex_pairs"])
    result = classify_linear_dynamics(
        m, budget=mc["budget"], zero_tol=mc["zero_tol"],
        divergence_tol=mc["divergence_tol"], seed=seed,
    )
    row = report.McRow(
        seed=seed,
        max_eig_norm=float(norms[0]),
        klass=result.tag,
        final_norm=float(result.evidence["final_norm"]),
        steps=int(result.evidence["steps"]),
    )
    return row, result.evidence["radius_agrees"]


def run_linear_mc(cfg):
    out = cfg.out_dir
    mc = cfg.linear_mc
    rows, summaries = [], []
    for group in ("contractive", "expansive"):
        with phase(f"classifying {mc['count']} {group} matrices"):
            jobs = [
                joblib.delayed(_mc_matrix)(mc, group, derive_seed(cfg.seed, "linear_mc", group, i))
                for i in range(mc["count"])
            ]
            results = _parallel(jobs, cfg.jobs, f"{group} matrices")
            group_rows = [r for r, _ in results]
            disagree = sum(1 for _, ok in results if not ok)
            if disagree:
                print(HEAD + f"{disagree} {group} matrices disagree with their spectral radius",
                      flush=True)
            rows.extend(group_rows)
            summaries.append(report.mc_summary(group, group_rows))

    with phase("writing results"):
        report.emit(rows, "csv", os.path.join(out, "linear_mc.csv"), row_type=report.McRow)
        report.emit(summaries, "csv", os.path.join(out, "summary.csv"),
                    row_type=report.McSummaryRow)
        write_manifest(cfg)
    return summaries


PIPELINES = {
    "feature": run_feature,
    "proto": run_proto,
    "sae": run_sae,
    "linear_mc": run_linear_mc,
}


def run(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    print(HEAD + f"running {cfg.experiment} experiment into {cfg.out_dir}", flush=True)
    return PIPELINES[cfg.experiment](cfg)


def load_traces(trace_dir):
    blobs = []
    for path in sorted(glob.glob(os.path.join(trace_dir, "*.json"))):
        blob = report.read_json(path)
        blobs.extend(blob if isinstance(blob, list) else [blob])
    return blobs


def reaggregate(trace_dir, out_path, keys=("dataset", "explainer")):
    """Rebuild a SummaryRow table from trace files on disk."""
    with phase(f"aggregating traces in {trace_dir}"):
        blobs = load_traces(trace_dir)
        rows = report.aggregate(blobs, keys)
        report.emit(rows, "csv", out_path)
    return rows
