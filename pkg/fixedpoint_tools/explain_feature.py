"""Feature-based explainers over masks of kept feature indices.

A step rebuilds the masked input from the untouched original x0, scores the
kept features and drops the least important ones. The returned mask is always
a subset of the input mask, so the recursion walks down a finite chain and
must stop.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DimensionMismatch
from .models import input_gradient, predict_proba

RULES = ["topk", "threshold"]


@dataclass(frozen=True)
class FeatureMask:
    kept: Tuple[int, ...]
    dim: int

    def __post_init__(self):
        kept = tuple(sorted(set(int(i) for i in self.kept)))
        if any(i < 0 or i >= self.dim for i in kept):
            raise ValueError(f"mask indices must lie in [0, {self.dim})")
        object.__setattr__(self, "kept", kept)

    @classmethod
    def full(cls, dim):
        return cls(tuple(range(dim)), dim)

    @classmethod
    def empty(cls, dim):
        return cls((), dim)

    def __len__(self):
        return len(self.kept)

    def __contains__(self, i):
        return i in self.kept

    def issubset(self, other):
        return set(self.kept) <= set(other.kept)

    def without(self, i):
        return FeatureMask(tuple(j for j in self.kept if j != i), self.dim)

    def to_json(self):
        return {"kept": list(self.kept), "dim": self.dim}

    @classmethod
    def from_json(cls, blob):
        return cls(tuple(blob["kept"]), int(blob["dim"]))


def _check(x, mask):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.dim,):
        raise DimensionMismatch(f"input has shape {x.shape}, mask has dim {mask.dim}")
    return x


def apply_support(x, mask):
    """Keep the masked features of x and zero the others."""
    x = _check(x, mask)
    out = np.zeros_like(x)
    kept = list(mask.kept)
    out[kept] = x[kept]
    return out


def importance_occlusion(model, x, mask, target):
    """Drop in p_target when each kept feature is additionally occluded."""
    x = _check(x, mask)
    scores = np.zeros(mask.dim)
    if not mask.kept:
        return scores
    base = apply_support(x, mask)
    batch = np.repeat(base[None, :], len(mask) + 1, axis=0)
    for row, i in enumerate(mask.kept, start=1):
        batch[row, i] = 0.0
    probs = predict_proba(model, batch)[:, target]
    scores[list(mask.kept)] = probs[0] - probs[1:]
    return scores


def importance_gradient_input(model, x, mask, target):
    """Gradient of log p_target at the masked input, times the input."""
    x = _check(x, mask)
    grad = input_gradient(model, apply_support(x, mask), target)
    scores = np.zeros(mask.dim)
    kept = list(mask.kept)
    scores[kept] = grad[kept] * x[kept]
    return scores


SCORERS = {
    "occlusion": importance_occlusion,
    "gradient_input": importance_gradient_input,
}


def _check_rule(rule):
    kind = rule.get("kind")
    if kind == "topk":
        if int(rule["k"]) < 0:
            raise ValueError("topk needs k >= 0")
    elif kind == "threshold":
        if not math.isfinite(float(rule["tau"])):
            raise ValueError("threshold needs a finite tau")
    else:
        raise ValueError(f"unknown selection rule '{kind}'")


def select_deflationary(scores, mask, rule, max_remove_fraction):
    """Shrink `mask` towards the features picked by `rule`.

    rule is {"kind": "topk", "k": k} or {"kind": "threshold", "tau": tau}.
    At most ceil(rho * |mask|) of the unselected features are removed per
    call, lowest |score| first; ties go to the lowest index.
    """
    _check_rule(rule)
    rho = float(max_remove_fraction)
    if not 0.0 < rho <= 1.0:
        raise ValueError("max_remove_fraction must be in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (mask.dim,):
        raise DimensionMismatch(f"scores have shape {scores.shape}, mask has dim {mask.dim}")

    kept = list(mask.kept)
    if rule["kind"] == "topk":
        ranked = sorted(kept, key=lambda i: (-scores[i], i))
        candidate = set(ranked[:int(rule["k"])])
    else:
        candidate = {i for i in kept if scores[i] >= float(rule["tau"])}
    if len(candidate) == len(kept):
        return mask

    budget = math.ceil(rho * len(kept))
    dropped = sorted(
        (i for i in kept if i not in candidate), key=lambda i: (abs(scores[i]), i)
    )[:budget]
    dropped = set(dropped)
    return FeatureMask(tuple(i for i in kept if i not in dropped), mask.dim)


def explainer_step_feature(model, x0, mask, scorer, rule, max_remove_fraction, target=None):
    """One recursion step: support -> score -> deflationary selection.

    `scorer` is a name from SCORERS or a callable with the same signature.
    `target` defaults to the model's label on the masked input.
    """
    if isinstance(scorer, str):
        scorer = SCORERS[scorer]
    if target is None:
        target = int(np.argmax(predict_proba(model, apply_support(x0, mask))[0]))
    scores = scorer(model, x0, mask, target)
    return select_deflationary(scores, mask, rule, max_remove_fraction)
