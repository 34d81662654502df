"""YAML experiment configs: parse, merge with defaults and validate.

Every key of the file must exist in `metadata.DEFAULT_CONFIG`; the first
problem found is reported as a ValidationError naming its dotted key.
"""
import copy
import math
import os
import re
from dataclasses import asdict, dataclass

import yaml

from .engine import build_suite
from .errors import ParseError, ValidationError
from .explain_feature import RULES, SCORERS
from .explain_sae import NONLINEARITIES
from .metadata import DEFAULT_CONFIG, EXPERIMENT_KINDS, OPEN_KEYS
from .models import ARCHITECTURES, SYNTHETIC_KINDS

OUT_DIR_ENV = "FIXEDPOINT_OUT_DIR"
DATASET_KINDS = SYNTHETIC_KINDS + ["csv"]


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    budget: int
    jobs: int
    dataset: dict
    model: dict
    explainer: dict
    prototypes: dict
    sae: dict
    linear_mc: dict
    properties: list
    output: dict

    def as_dict(self):
        return asdict(self)

    @property
    def out_dir(self):
        return self.output["dir"]


def _merge(defaults, given, prefix=""):
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ValidationError(dotted, "unknown key")
        if isinstance(defaults[key], dict) and key not in OPEN_KEYS:
            if not isinstance(value, dict):
                raise ValidationError(dotted, "must be a mapping")
            merged[key] = _merge(defaults[key], value, prefix=dotted + ".")
        else:
            merged[key] = value
    return merged


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _int(section, key, dotted, minimum):
    v = section[key]
    if not _is_int(v) or v < minimum:
        raise ValidationError(dotted, f"{key} must be an integer >= {minimum}")


def _positive(section, key, dotted):
    v = section[key]
    if not _is_real(v) or v <= 0:
        raise ValidationError(dotted, f"{key} must be > 0")


def _non_negative(section, key, dotted):
    v = section[key]
    if not _is_real(v) or v < 0:
        raise ValidationError(dotted, f"{key} must be >= 0")


def _choice(section, key, dotted, choices):
    if section[key] not in choices:
        raise ValidationError(dotted, f"{key} must be one of {', '.join(choices)}")


def _path(section, key, dotted, base):
    value = section[key]
    if value is None:
        return
    if not isinstance(value, str):
        raise ValidationError(dotted, f"{key} must be a path")
    resolved = value if os.path.isabs(value) else os.path.join(base, value)
    if not os.path.exists(resolved):
        raise ValidationError(dotted, f"{resolved} does not exist")
    section[key] = os.path.normpath(resolved)


def _range(section, key, dotted):
    v = section[key]
    if not (isinstance(v, list) and len(v) == 2 and all(_is_real(x) for x in v) and v[0] < v[1]):
        raise ValidationError(dotted, f"{key} must be [low, high] with low < high")


def _validate(cfg, base):
    if cfg["experiment"] not in EXPERIMENT_KINDS:
        raise ValidationError(
            "experiment", f"experiment must be one of {', '.join(EXPERIMENT_KINDS)}"
        )
    _int(cfg, "seed", "seed", 0)
    _int(cfg, "budget", "budget", 1)
    _int(cfg, "jobs", "jobs", 1)

    ds = cfg["dataset"]
    _choice(ds, "kind", "dataset.kind", DATASET_KINDS)
    _path(ds, "path", "dataset.path", base)
    if ds["kind"] == "csv" and ds["path"] is None:
        raise ValidationError("dataset.path", "path is required for csv datasets")
    _int(ds, "classes", "dataset.classes", 2)
    _int(ds, "dim", "dataset.dim", 1)
    if ds["kind"] == "grid_patterns" and math.isqrt(ds["dim"]) ** 2 != ds["dim"]:
        raise ValidationError("dataset.dim", "dim must be a perfect square for grid_patterns")
    _int(ds, "per_class", "dataset.per_class", 1)
    _non_negative(ds, "noise", "dataset.noise")
    _int(ds, "n_inputs", "dataset.n_inputs", 1)

    model = cfg["model"]
    _choice(model, "architecture", "model.architecture", ARCHITECTURES)
    _int(model, "hidden", "model.hidden", 1)
    _int(model, "epochs", "model.epochs", 0)
    _positive(model, "lr", "model.lr")
    _int(model, "batch_size", "model.batch_size", 1)

    ex = cfg["explainer"]
    _choice(ex, "scorer", "explainer.scorer", list(SCORERS))
    _choice(ex, "rule", "explainer.rule", RULES)
    _int(ex, "k", "explainer.k", 0)
    if not _is_real(ex["threshold"]):
        raise ValidationError("explainer.threshold", "threshold must be a finite number")
    _positive(ex, "max_remove_fraction", "explainer.max_remove_fraction")
    if ex["max_remove_fraction"] > 1:
        raise ValidationError(
            "explainer.max_remove_fraction", "max_remove_fraction must be <= 1"
        )

    protos = cfg["prototypes"]
    sizes = protos["sizes"]
    if not (isinstance(sizes, list) and sizes and all(_is_int(s) and s >= 2 for s in sizes)):
        raise ValidationError("prototypes.sizes", "sizes must be a list of integers >= 2")
    _int(protos, "latent_dim", "prototypes.latent_dim", 1)
    _non_negative(protos, "ridge", "prototypes.ridge")
    _non_negative(protos, "jitter", "prototypes.jitter")
    _path(protos, "path", "prototypes.path", base)
    _int(protos, "n_inputs", "prototypes.n_inputs", 1)

    sae = cfg["sae"]
    _int(sae, "width", "sae.width", 1)
    _int(sae, "k", "sae.k", 1)
    if sae["k"] > sae["width"]:
        raise ValidationError("sae.k", "k must be <= width")
    _choice(sae, "nonlinearity", "sae.nonlinearity", NONLINEARITIES)
    _int(sae, "epochs", "sae.epochs", 0)
    _positive(sae, "lr", "sae.lr")
    _path(sae, "path", "sae.path", base)
    _positive(sae, "tau_dist", "sae.tau_dist")
    if sae["tau_dist"] > 1:
        raise ValidationError("sae.tau_dist", "tau_dist must be <= 1")
    _positive(sae, "conv_tol", "sae.conv_tol")
    _positive(sae, "divergence_tol", "sae.divergence_tol")
    if cfg["experiment"] == "sae" and model["architecture"] != "mlp1":
        raise ValidationError("model.architecture", "sae experiments need the mlp1 architecture")

    mc = cfg["linear_mc"]
    _int(mc, "count", "linear_mc.count", 1)
    _int(mc, "dim", "linear_mc.dim", 1)
    _range(mc, "contractive_range", "linear_mc.contractive_range")
    low, high = mc["contractive_range"]
    if low < 0 or high >= 1:
        raise ValidationError("linear_mc.contractive_range", "contractive norms must lie in [0, 1)")
    _range(mc, "expansive_range", "linear_mc.expansive_range")
    if not mc["expansive_range"][0] > 1:
        raise ValidationError("linear_mc.expansive_range", "expansive norms must be > 1")
    _int(mc, "complex_pairs", "linear_mc.complex_pairs", 0)
    if 2 * mc["complex_pairs"] > mc["dim"]:
        raise ValidationError("linear_mc.complex_pairs", "complex_pairs must be <= dim / 2")
    _int(mc, "budget", "linear_mc.budget", 1)
    _positive(mc, "zero_tol", "linear_mc.zero_tol")
    _positive(mc, "divergence_tol", "linear_mc.divergence_tol")

    if not isinstance(cfg["properties"], list):
        raise ValidationError("properties", "properties must be a list")
    for i, spec in enumerate(cfg["properties"]):
        if not isinstance(spec, dict):
            raise ValidationError(f"properties[{i}]", "each property must be a mapping")
        try:
            build_suite([spec])
        except (ValueError, TypeError, KeyError) as e:
            raise ValidationError(f"properties[{i}]", str(e))

    if not isinstance(cfg["output"]["dir"], str) or not cfg["output"]["dir"]:
        raise ValidationError("output.dir", "dir must be a non-empty path")


def _key_on_line(text, line):
    lines = text.splitlines()
    if not 1 <= line <= len(lines):
        return None
    m = re.match(r"\s*-?\s*([\w.-]+)\s*:", lines[line - 1])
    return m.group(1) if m else None


def load_yaml(path):
    with open(path, "r") as fp:
        text = fp.read()
    try:
        blob = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ParseError(line, _key_on_line(text, line), getattr(e, "problem", "") or str(e))
    if blob is None:
        return {}
    if not isinstance(blob, dict):
        raise ValidationError("<root>", "config must be a mapping")
    return blob


def parse_config(path, experiment=None, overrides=None):
    """Parse and validate the YAML config at `path`.

    `experiment` fills the experiment kind when the file leaves it out (the
    CLI subcommand). `overrides` maps seed / jobs / out to values given on the
    command line; they win over the environment, which wins over the file.
    """
    if not os.path.exists(path):
        raise ValidationError("--config", f"{path} does not exist")
    given = load_yaml(path)
    cfg = _merge(DEFAULT_CONFIG, given)
    if isinstance(cfg["experiment"], str):
        cfg["experiment"] = cfg["experiment"].replace("-", "_")
    if experiment is not None:
        experiment = experiment.replace("-", "_")
        if cfg["experiment"] not in (None, experiment):
            raise ValidationError(
                "experiment",
                f"config is for '{cfg['experiment']}' but '{experiment}' was requested",
            )
        cfg["experiment"] = experiment

    if os.environ.get(OUT_DIR_ENV):
        cfg["output"]["dir"] = os.environ[OUT_DIR_ENV]
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        cfg["seed"] = overrides["seed"]
    if overrides.get("jobs") is not None:
        cfg["jobs"] = overrides["jobs"]
    if overrides.get("out") is not None:
        cfg["output"]["dir"] = overrides["out"]

    _validate(cfg, os.path.dirname(os.path.abspath(path)))
    return ExperimentConfig(**cfg)
