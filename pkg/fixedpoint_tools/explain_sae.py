"""Recursive sparse autoencoders on the hidden layer of an mlp1 classifier.

One SAE step maps a hidden state z to a(z W_E) W_D where a keeps the k
largest-magnitude codes. For a fixed top-k pattern the step is the linear map
W_P = W_E[:, P] W_D[P, :], so convergence of the recursion reduces to the
dynamics of x -> x W_P.
"""
import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import rapidjson as json

from .errors import (
    DimensionMismatch, Diverged, InputFileError, NoHiddenTap, NonFinite, TooManyPatterns,
)
from .linalg import as_matrix, read_matrix, spectral_radius_estimate, start_vector, write_matrix
from .metadata import CONV_TOL, DIVERGENCE_TOL, DYNAMICS_BUDGET, HEAD, MAX_TOPK_PATTERNS, ZERO_TOL
from .models import hidden_activation, logits_from_hidden, prediction_from_logits

NONLINEARITIES = ["identity", "topk"]
MANIFEST_KEYS = ["encoder", "decoder", "k", "nonlinearity"]

CONTRACTS_TO_ZERO = "ContractsToZero"
CONVERGES_NONZERO = "ConvergesNonzeroFixedPoint"
BOUNDED = "BoundedNonConvergent"
DIVERGES = "Diverges"

# worst first; used to merge per-pattern verdicts
SEVERITY = [DIVERGES, BOUNDED, CONVERGES_NONZERO, CONTRACTS_TO_ZERO]


@dataclass(frozen=True)
class LinearSae:
    encode: np.ndarray
    decode: np.ndarray
    k: int
    nonlinearity: str = "topk"

    @property
    def z_dim(self):
        return self.encode.shape[0]

    @property
    def width(self):
        return self.encode.shape[1]


@dataclass(frozen=True)
class HiddenState:
    z: np.ndarray
    active: Tuple[int, ...] = ()


@dataclass(frozen=True)
class DynamicsClass:
    tag: str
    evidence: dict = field(default_factory=dict)


def make_sae(encode, decode, k=None, nonlinearity="topk"):
    encode = as_matrix(encode)
    decode = as_matrix(decode)
    if decode.shape != (encode.shape[1], encode.shape[0]):
        raise ValueError(f"decoder {decode.shape} does not invert encoder {encode.shape}")
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity '{nonlinearity}'")
    if k is None:
        k = encode.shape[1]
    if nonlinearity == "topk" and not 1 <= k <= encode.shape[1]:
        raise ValueError(f"k={k} outside [1, {encode.shape[1]}]")
    return LinearSae(encode, decode, int(k), nonlinearity)


def topk_pattern(h, k):
    """Indices of the k largest |h| entries, sorted; ties go to the lowest index."""
    order = np.argsort(-np.abs(h), kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def encode_codes(sae, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (sae.z_dim,):
        raise DimensionMismatch(f"state has shape {z.shape}, SAE expects ({sae.z_dim},)")
    return z @ sae.encode


def sae_step(sae, z):
    h = encode_codes(sae, z)
    if sae.nonlinearity == "identity":
        return HiddenState(h @ sae.decode, ())
    active = topk_pattern(h, sae.k)
    gate = np.zeros_like(h)
    gate[list(active)] = 1.0
    return HiddenState((h * gate) @ sae.decode, active)


def active_set(sae, z):
    """Top-k codes the SAE would select for z (empty for identity)."""
    if sae.nonlinearity == "identity":
        return ()
    return topk_pattern(encode_codes(sae, z), sae.k)


def patched_predict(model, x, z_override):
    """Forward pass of `model` on x with its hidden layer replaced by z_override."""
    if not model.has_hidden_tap:
        raise NoHiddenTap(f"{model.architecture} models expose no hidden layer")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DimensionMismatch(f"input has shape {x.shape}, model expects ({model.dim},)")
    z = np.asarray(z_override, dtype=np.float64)
    if z.shape != (model.hidden_width,):
        raise DimensionMismatch(
            f"override has shape {z.shape}, hidden layer is ({model.hidden_width},)"
        )
    if not np.all(np.isfinite(z)):
        raise NonFinite("override has non-finite entries")
    return prediction_from_logits(logits_from_hidden(model, z))


def classify_linear_dynamics(
    w,
    budget=DYNAMICS_BUDGET,
    zero_tol=ZERO_TOL,
    conv_tol=CONV_TOL,
    divergence_tol=DIVERGENCE_TOL,
    seed=0,
):
    """Iterate a seeded unit vector under x -> x W and classify the orbit.

    Checked in order at every step: norm above divergence_tol (or non-finite)
    -> Diverges; norm at most zero_tol -> ContractsToZero; successive iterates
    within conv_tol (relative, L-inf) -> ConvergesNonzeroFixedPoint. An orbit
    that does none of these within the budget is BoundedNonConvergent.
    """
    w = as_matrix(w, square=True)
    x = start_vector(w.shape[0], seed)
    norms = [float(np.linalg.norm(x))]
    tag = BOUNDED
    steps = budget
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, budget + 1):
            nxt = x @ w
            norm = float(np.linalg.norm(nxt))
            norms.append(norm)
            if not math.isfinite(norm) or norm > divergence_tol:
                tag, steps = DIVERGES, step
                break
            if norm <= zero_tol:
                tag, steps = CONTRACTS_TO_ZERO, step
                x = nxt
                break
            if np.abs(nxt - x).max() <= conv_tol * np.abs(nxt).max():
                tag, steps = CONVERGES_NONZERO, step
                x = nxt
                break
            x = nxt

    radius = spectral_radius_estimate(w, seed=seed)
    if tag == CONTRACTS_TO_ZERO:
        agrees = radius < 1.0
    elif tag == DIVERGES:
        agrees = radius > 1.0
    else:
        agrees = abs(radius - 1.0) <= 1e-6
    if not agrees:
        print(
            HEAD + f"dynamics tag {tag} disagrees with spectral radius {radius:.9f}",
            flush=True,
        )

    evidence = {
        "radius": radius,
        "radius_agrees": bool(agrees),
        "steps": steps,
        "final_norm": norms[-1],
        "norms": norms,
    }
    if tag == CONVERGES_NONZERO:
        evidence["limit"] = x.tolist()
    return DynamicsClass(tag, evidence)


def pattern_matrix(sae, pattern):
    idx = list(pattern)
    return sae.encode[:, idx] @ sae.decode[idx, :]


def nonlinear_fixed_point_bruteforce(sae, **dynamics_kwargs):
    """Classify the linear map of every possible top-k pattern.

    The verdict is the worst per-pattern tag; ContractsToZero for all
    patterns means every stretch of a trajectory under a fixed pattern
    contracts.
    """
    k = sae.width if sae.nonlinearity == "identity" else sae.k
    n_patterns = math.comb(sae.width, k)
    if n_patterns > MAX_TOPK_PATTERNS:
        raise TooManyPatterns(
            f"C({sae.width}, {k}) = {n_patterns} patterns exceeds {MAX_TOPK_PATTERNS}"
        )
    results = []
    for pattern in itertools.combinations(range(sae.width), k):
        results.append(
            (pattern, classify_linear_dynamics(pattern_matrix(sae, pattern), **dynamics_kwargs))
        )
    tags = {r.tag for _, r in results}
    verdict = next(t for t in SEVERITY if t in tags)
    return {
        "patterns": results,
        "verdict": verdict,
        "all_contract": tags == {CONTRACTS_TO_ZERO},
    }


def jaccard_active(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def harvest_hidden(model, inputs):
    if not model.has_hidden_tap:
        raise NoHiddenTap(f"{model.architecture} models expose no hidden layer")
    return np.stack([hidden_activation(model, x) for x in inputs])


def train_sae(hidden_states, width, k, nonlinearity="topk", epochs=200, lr=0.01, seed=0):
    """Fit W_E / W_D by full-batch gradient descent on squared reconstruction error.

    The top-k gate is held fixed inside each gradient evaluation. The step
    size is divided by the mean squared norm of the hidden states so `lr` is
    scale free.
    """
    states = as_matrix(hidden_states)
    n, z_dim = states.shape
    if nonlinearity == "identity":
        k = width
    rng = np.random.default_rng(seed)
    encode = rng.standard_normal((z_dim, width)) / math.sqrt(z_dim)
    decode = encode.T.copy()
    step = lr / max(float(np.mean((states ** 2).sum(axis=1))), 1e-12)

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            codes = states @ encode
            if nonlinearity == "topk":
                gate = np.zeros_like(codes)
                top = np.argsort(-np.abs(codes), axis=1, kind="stable")[:, :k]
                np.put_along_axis(gate, top, 1.0, axis=1)
            else:
                gate = np.ones_like(codes)
            active = codes * gate
            residual = active @ decode - states
            grad_decode = (2.0 / n) * active.T @ residual
            grad_codes = (2.0 / n) * (residual @ decode.T) * gate
            grad_encode = states.T @ grad_codes
            decode -= step * grad_decode
            encode -= step * grad_encode
            if not (np.all(np.isfinite(encode)) and np.all(np.isfinite(decode))):
                raise Diverged(f"SAE weights became non-finite at epoch {epoch}")
    return make_sae(encode, decode, k, nonlinearity)


def save_sae(directory, sae):
    os.makedirs(directory, exist_ok=True)
    write_matrix(os.path.join(directory, "encoder.csv"), sae.encode)
    write_matrix(os.path.join(directory, "decoder.csv"), sae.decode)
    manifest = {
        "k": sae.k,
        "nonlinearity": sae.nonlinearity,
        "encoder": "encoder.csv",
        "decoder": "decoder.csv",
    }
    with open(os.path.join(directory, "sae.json"), "w") as fp:
        json.dump(manifest, fp, indent=2)


def load_sae(manifest_path):
    with open(manifest_path, "r") as fp:
        try:
            manifest = json.load(fp)
        except ValueError as e:
            raise InputFileError(manifest_path, f"not a JSON manifest: {e}")
    if not isinstance(manifest, dict):
        raise InputFileError(manifest_path, "manifest must be a JSON object")
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise InputFileError(manifest_path, f"missing keys {missing}")
    base = os.path.dirname(manifest_path)
    encode = read_matrix(os.path.join(base, manifest["encoder"]))
    decode = read_matrix(os.path.join(base, manifest["decoder"]))
    try:
        return make_sae(encode, decode, k=manifest["k"], nonlinearity=manifest["nonlinearity"])
    except (TypeError, ValueError) as e:
        raise InputFileError(manifest_path, str(e))
