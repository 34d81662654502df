# defaults shared by the library and the experiment config
# do not change these without bumping SCHEMA_VERSION
# - result files and traces are compared byte for byte across runs
VERSION = "0.1.0"
SCHEMA_VERSION = 1

HEAD = "FIXEDPOINT: "

# numerical cutoffs
ZERO_TOL = 1e-8
DIVERGENCE_TOL = 1e6
CONV_TOL = 1e-9
PIVOT_TOL = 1e-12
CONDITION_LIMIT = 1e6
MAX_BASIS_ATTEMPTS = 20
DYNAMICS_BUDGET = 10000
RECURSION_BUDGET = 1000
MAX_TOPK_PATTERNS = 10000
TAU_DIST = 0.05
EXTRA_APPLICATIONS = 100

EXPERIMENT_KINDS = ["feature", "proto", "sae", "linear_mc"]

PROPERTY_TAGS = [
    "LabelPreserved",
    "CorrectLabel",
    "TopKAgreement",
    "DistributionClose",
    "LocalStabilitySampled",
]

DEFAULT_CONFIG = {
    "experiment": None,
    "seed": 0,
    "budget": RECURSION_BUDGET,
    "jobs": 1,
    "dataset": {
        "kind": "grid_patterns",
        "path": None,
        "classes": 4,
        "dim": 16,
        "per_class": 50,
        "noise": 0.1,
        "n_inputs": 50,
    },
    "model": {
        "architecture": "linear",
        "hidden": 16,
        "epochs": 30,
        "lr": 0.1,
        "batch_size": 32,
    },
    "explainer": {
        "scorer": "occlusion",
        "rule": "topk",
        "k": 4,
        "threshold": 0.0,
        "max_remove_fraction": 1.0,
    },
    "prototypes": {
        "sizes": [10, 20, 50, 100],
        "latent_dim": 4,
        "ridge": 0.5,
        "jitter": 0.5,
        "path": None,
        "n_inputs": 100,
    },
    "sae": {
        "width": 32,
        "k": 4,
        "nonlinearity": "topk",
        "epochs": 200,
        "lr": 0.01,
        "path": None,
        "tau_dist": TAU_DIST,
        "conv_tol": CONV_TOL,
        "divergence_tol": DIVERGENCE_TOL,
    },
    "linear_mc": {
        "count": 1000,
        "dim": 10,
        "contractive_range": [0.1, 0.95],
        "expansive_range": [1.05, 2.0],
        "complex_pairs": 0,
        "budget": DYNAMICS_BUDGET,
        "zero_tol": ZERO_TOL,
        "divergence_tol": DIVERGENCE_TOL,
    },
    "properties": [
        {"tag": "LabelPreserved"},
    ],
    "output": {
        "dir": "results",
    },
}

# keys whose values are free-form lists/dicts and are validated separately
OPEN_KEYS = {"properties"}
