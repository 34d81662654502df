"""Recursion driver: iterate an explainer step on its own output, detect fixed
points, cycles and divergence, and check properties at every iterate.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np

from .errors import MissingContext, NoCycleWithinBudget, NonDeterministicStep
from .explain_feature import FeatureMask, apply_support, explainer_step_feature
from .explain_proto import explain_input, prototype_prediction, transition
from .explain_sae import active_set, patched_predict, sae_step
from .metadata import CONV_TOL, DIVERGENCE_TOL, EXTRA_APPLICATIONS, PROPERTY_TAGS, RECURSION_BUDGET
from .models import predict
from .utils import derive_seed

STEP_KINDS = ["feature", "prototype", "sae"]

FIXED_POINT = "FixedPoint"
CYCLE = "Cycle"
DIVERGED = "Diverged"
BUDGET_EXHAUSTED = "BudgetExhausted"


@dataclass(frozen=True)
class ExplainerStep:
    """A bound explainer ready to be iterated.

    `apply` maps a state to the next state. `observe` gives the model's
    prediction at a state and `realize` / `observe_vector` expose the state
    as a vector so it can be perturbed. Discrete kinds compare states
    exactly; the sae kind compares them in L-inf within `conv_tol` and reports
    divergence once the L-inf norm of a state exceeds `divergence_tol`.
    """
    kind: str
    apply: Callable[[Any], Any]
    observe: Callable[[Any], Any]
    realize: Optional[Callable[[Any], np.ndarray]] = None
    observe_vector: Optional[Callable[[np.ndarray], Any]] = None
    active: Optional[Callable[[Any], tuple]] = None
    degenerate: Optional[Callable[[Any], bool]] = None
    conv_tol: float = CONV_TOL
    divergence_tol: float = DIVERGENCE_TOL

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind '{self.kind}'")

    @property
    def discrete(self):
        return self.kind != "sae"

    def key(self, state):
        if self.kind == "feature":
            return state.kept
        if self.kind == "prototype":
            return int(state)
        return None

    def equal(self, a, b):
        if self.discrete:
            return self.key(a) == self.key(b)
        return bool(np.abs(np.asarray(a) - np.asarray(b)).max() <= self.conv_tol)

    def identical(self, a, b):
        if self.discrete:
            return self.key(a) == self.key(b)
        return bool(np.array_equal(a, b))

    def encode_state(self, state):
        if self.kind == "feature":
            return list(state.kept)
        if self.kind == "prototype":
            return int(state)
        return [float(v) for v in state]


@dataclass(frozen=True)
class Outcome:
    type: str
    k: Optional[int] = None
    entry: Optional[int] = None
    period: Optional[int] = None

    @property
    def steps(self):
        """Applications needed to reach the terminal behaviour."""
        if self.type == CYCLE:
            return self.entry + self.period
        return self.k

    def to_json(self):
        if self.type == CYCLE:
            return {"type": self.type, "entry": self.entry, "period": self.period}
        if self.type == BUDGET_EXHAUSTED:
            return {"type": self.type}
        return {"type": self.type, "k": self.k}

    @classmethod
    def from_json(cls, blob):
        return cls(blob["type"], blob.get("k"), blob.get("entry"), blob.get("period"))


@dataclass
class RecursionTrace:
    kind: str
    states: List[Any]
    outcome: Outcome
    predictions: List[Any] = field(default_factory=list)
    active: List[tuple] = field(default_factory=list)
    record: dict = field(default_factory=dict)

    @property
    def terminal(self):
        return self.states[-1]


@dataclass(frozen=True)
class Property:
    tag: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PropertySuite:
    properties: tuple = ()

    @property
    def tags(self):
        return [p.tag for p in self.properties]


@dataclass(frozen=True)
class PropertyContext:
    step: Optional[ExplainerStep] = None
    ground_truth: Optional[int] = None
    seed: int = 0


@dataclass(frozen=True)
class PropertyReport:
    tags: tuple
    matrix: tuple
    first_violation: Optional[dict]
    certified: bool
    terminal_satisfied: bool

    def to_json(self):
        return {
            "tags": list(self.tags),
            "matrix": [list(row) for row in self.matrix],
            "first_violation": self.first_violation,
            "certified": self.certified,
            "terminal_satisfied": self.terminal_satisfied,
        }


def _check_property(prop):
    if prop.tag not in PROPERTY_TAGS:
        raise ValueError(f"unknown property '{prop.tag}'")
    p = prop.params
    if prop.tag == "TopKAgreement" and int(p.get("k", 1)) < 1:
        raise ValueError("TopKAgreement needs k >= 1")
    if prop.tag == "DistributionClose":
        tau = float(p.get("tau", 0.05))
        if not 0.0 < tau <= 1.0:
            raise ValueError("DistributionClose needs 0 < tau <= 1")
        if p.get("reference", "next") not in ("next", "terminal"):
            raise ValueError("DistributionClose reference must be 'next' or 'terminal'")
    if prop.tag == "LocalStabilitySampled":
        if not float(p.get("rho", 0.0)) > 0.0:
            raise ValueError("LocalStabilitySampled needs rho > 0")
        if int(p.get("samples", 0)) < 1:
            raise ValueError("LocalStabilitySampled needs samples >= 1")


def build_suite(specs):
    """Build a PropertySuite from [{"tag": ..., **params}, ...]."""
    props = []
    for spec in specs or []:
        spec = dict(spec)
        prop = Property(spec.pop("tag", None), spec)
        _check_property(prop)
        props.append(prop)
    return PropertySuite(tuple(props))


def run_recursion(step, start, budget=RECURSION_BUDGET):
    """Iterate `step` from `start` until a fixed point, a cycle, divergence or
    the budget.

    states[0] is `start`. For FixedPoint{k} the list ends with states[k+1],
    equal to states[k]; for Cycle{n, m} it ends with the first repeat,
    states[n + m] == states[n]. Every terminal transition is recomputed once
    and must reproduce the same successor.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    states = [start]
    seen = {step.key(start): 0} if step.discrete else None
    outcome = Outcome(BUDGET_EXHAUSTED)

    for _ in range(budget):
        current = states[-1]
        nxt = step.apply(current)
        if step.equal(current, nxt):
            _confirm(step, current, nxt)
            states.append(nxt)
            outcome = Outcome(FIXED_POINT, k=len(states) - 2)
            break
        if step.discrete:
            key = step.key(nxt)
            if key in seen:
                _confirm(step, current, nxt)
                entry = seen[key]
                outcome = Outcome(CYCLE, entry=entry, period=len(states) - entry)
                states.append(nxt)
                break
            seen[key] = len(states)
        else:
            norm = float(np.abs(nxt).max())
            if not math.isfinite(norm) or norm > step.divergence_tol:
                states.append(nxt)
                outcome = Outcome(DIVERGED, k=len(states) - 1)
                break
        states.append(nxt)

    trace = RecursionTrace(step.kind, states, outcome)
    trace.predictions = [_observe(step, s) for s in states]
    if step.active is not None:
        trace.active = [step.active(s) for s in states]
    return trace


def _confirm(step, state, successor):
    again = step.apply(state)
    if not step.identical(again, successor):
        raise NonDeterministicStep(
            f"{step.kind} step produced two different successors for the same state"
        )


def _observe(step, state):
    if not step.discrete and not np.all(np.isfinite(state)):
        return None
    return step.observe(state)


def extend_trace(trace, step, extra=EXTRA_APPLICATIONS):
    """Apply the step `extra` more times after the terminal state."""
    states = list(trace.states)
    for _ in range(extra):
        states.append(step.apply(states[-1]))
    extended = RecursionTrace(trace.kind, states, trace.outcome, record=dict(trace.record))
    extended.predictions = list(trace.predictions) + [
        _observe(step, s) for s in states[len(trace.states):]
    ]
    if step.active is not None:
        extended.active = [step.active(s) for s in states]
    return extended


def detect_cycle(next_state, start, max_states=RECURSION_BUDGET):
    """Brent's cycle detection on the sequence start, f(start), f(f(start)), ...

    Returns (entry, period) with both minimal. States are compared with ==.
    """
    power = period = 1
    tortoise = start
    hare = next_state(start)
    generated = 1
    while tortoise != hare:
        if power == period:
            tortoise = hare
            power *= 2
            period = 0
        hare = next_state(hare)
        period += 1
        generated += 1
        if generated > max_states:
            raise NoCycleWithinBudget(f"no cycle within {max_states} states")

    tortoise = hare = start
    for _ in range(period):
        hare = next_state(hare)
    entry = 0
    while tortoise != hare:
        tortoise = next_state(tortoise)
        hare = next_state(hare)
        entry += 1
    return entry, period


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _target(prop, context):
    y = prop.params.get("y", context.ground_truth)
    if y is None:
        raise MissingContext(f"{prop.tag} needs a ground-truth label")
    return int(y)


def _evaluate(prop, trace, i, context):
    pred = trace.predictions[i]
    if pred is None:
        return False
    tag = prop.tag
    if tag == "LabelPreserved":
        first = trace.predictions[0]
        return first is not None and pred.label == first.label
    if tag == "CorrectLabel":
        return pred.label == _target(prop, context)
    if tag == "TopKAgreement":
        return _target(prop, context) in pred.top(int(prop.params.get("k", 1)))
    if tag == "DistributionClose":
        tau = float(prop.params.get("tau", 0.05))
        ref = i + 1 if prop.params.get("reference", "next") == "next" else -1
        other = trace.predictions[min(ref, len(trace.predictions) - 1)]
        if other is None:
            return False
        return total_variation(pred.distribution, other.distribution) <= tau
    if tag == "LocalStabilitySampled":
        return _sampled_stability(prop, trace, i, context)
    raise ValueError(f"unknown property '{tag}'")


def _sampled_stability(prop, trace, i, context):
    # a True result only means no counterexample was drawn
    step = context.step
    if step is None or step.realize is None or step.observe_vector is None:
        raise MissingContext("LocalStabilitySampled needs a step that can be perturbed")
    rho = float(prop.params["rho"])
    samples = int(prop.params["samples"])
    rng = np.random.default_rng(derive_seed(context.seed, "stability", i))
    base = step.realize(trace.states[i])
    label = trace.predictions[i].label
    for _ in range(samples):
        noisy = base + rng.uniform(-rho, rho, size=base.shape)
        if step.observe_vector(noisy).label != label:
            return False
    return True


def evaluate_properties(trace, suite, context=None):
    context = context or PropertyContext()
    matrix = []
    first_violation = None
    for i in range(len(trace.states)):
        row = []
        for prop in suite.properties:
            ok = bool(_evaluate(prop, trace, i, context))
            if not ok and first_violation is None:
                first_violation = {"iteration": i, "property": prop.tag}
            row.append(ok)
        matrix.append(tuple(row))

    converged = trace.outcome.type == FIXED_POINT
    degenerate = False
    if converged and context.step is not None and context.step.degenerate is not None:
        degenerate = bool(context.step.degenerate(trace.terminal))
    certified = converged and not degenerate and first_violation is None
    terminal_satisfied = converged and all(matrix[-1])
    return PropertyReport(
        tuple(suite.tags), tuple(matrix), first_violation, certified, terminal_satisfied
    )


def certify_up_to_infinity(trace, step, suite, context=None, extra=EXTRA_APPLICATIONS):
    """Re-check certification after `extra` more applications of the step."""
    context = context or PropertyContext(step=step)
    return evaluate_properties(extend_trace(trace, step, extra), suite, context).certified


def trace_to_json(trace, step, report=None):
    blob = {
        "kind": trace.kind,
        "states": [step.encode_state(s) for s in trace.states],
        "outcome": trace.outcome.to_json(),
        "predictions": [
            None if p is None
            else {"label": p.label, "distribution": [float(v) for v in p.distribution]}
            for p in trace.predictions
        ],
    }
    if trace.kind == "sae":
        blob["active"] = [list(a) for a in trace.active]
    if report is not None:
        blob["properties"] = report.to_json()
    blob["record"] = dict(trace.record)
    return blob


# step factories


def identity_step(kind="prototype"):
    return ExplainerStep(kind, apply=lambda s: s, observe=lambda s: None)


def feature_step(model, x0, scorer, rule, max_remove_fraction):
    """Feature recursion on `x0`; importance always targets the label of x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    target = predict(model, x0).label
    return ExplainerStep(
        "feature",
        apply=lambda mask: explainer_step_feature(
            model, x0, mask, scorer, rule, max_remove_fraction, target=target
        ),
        observe=lambda mask: predict(model, apply_support(x0, mask)),
        realize=lambda mask: apply_support(x0, mask),
        observe_vector=lambda v: predict(model, v),
        degenerate=lambda mask: len(mask) == 0,
    )


def feature_start(x0):
    return FeatureMask.full(len(x0))


def prototype_step(system, exclude_self=False):
    def observe_vector(v):
        return prototype_prediction(system, explain_input(system, v))

    return ExplainerStep(
        "prototype",
        apply=lambda p: transition(system, p, exclude_self),
        observe=lambda p: prototype_prediction(system, p),
        realize=lambda p: system.decode(system.prototypes[p]),
        observe_vector=observe_vector,
    )


def sae_recursion_step(sae, model, x0, conv_tol=CONV_TOL, divergence_tol=DIVERGENCE_TOL):
    """SAE recursion on hidden states of `model`, observed by patching at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    return ExplainerStep(
        "sae",
        apply=lambda z: sae_step(sae, z).z,
        observe=lambda z: patched_predict(model, x0, z),
        realize=lambda z: np.asarray(z, dtype=np.float64),
        observe_vector=lambda z: patched_predict(model, x0, z),
        active=lambda z: active_set(sae, z) if np.all(np.isfinite(z)) else (),
        conv_tol=conv_tol,
        divergence_tol=divergence_tol,
    )
