"""Prototype explainers: nearest-prototype transitions over a finite set S.

The transition of a prototype decodes it back to input space, re-encodes it
and picks the nearest prototype, optionally excluding the prototype itself.
Because S is finite and the transition deterministic, the transition graph is
a functional digraph and every recursion ends in a cycle.
"""
import csv
from dataclasses import dataclass
from typing import Tuple

import networkx as nx
import numpy as np

from .errors import EmptyCandidateSet, EmptyClass, InputFileError
from .linalg import as_matrix, solve_linear
from .models import Prediction
from .utils import format_float

DISTANCES = ["euclidean", "squared_euclidean"]


@dataclass(frozen=True)
class PrototypeSystem:
    prototypes: np.ndarray
    classes: np.ndarray
    n_classes: int
    encoder: np.ndarray
    encoder_bias: np.ndarray
    decoder: np.ndarray
    decoder_bias: np.ndarray
    distance: str = "euclidean"

    def __len__(self):
        return self.prototypes.shape[0]

    @property
    def latent_dim(self):
        return self.prototypes.shape[1]

    def encode(self, x):
        return np.asarray(x) @ self.encoder + self.encoder_bias

    def decode(self, z):
        return np.asarray(z) @ self.decoder + self.decoder_bias


@dataclass(frozen=True)
class TransitionOutcome:
    next: Tuple[int, ...]
    cycles: Tuple[Tuple[int, ...], ...]
    # steps from each prototype to the first prototype on its cycle
    tail_length: Tuple[int, ...]
    # index into `cycles` of the cycle each prototype drains into
    cycle_of: Tuple[int, ...]

    def to_json(self):
        return {
            "next": list(self.next),
            "cycles": [list(c) for c in self.cycles],
            "tail_length": list(self.tail_length),
            "cycle_of": list(self.cycle_of),
        }


def make_prototype_system(
    prototypes, classes, encoder, decoder, encoder_bias=None, decoder_bias=None,
    n_classes=None, distance="euclidean",
):
    prototypes = as_matrix(prototypes)
    classes = np.array(classes, dtype=np.int64)
    encoder = as_matrix(encoder)
    decoder = as_matrix(decoder)
    n_protos, latent = prototypes.shape
    if n_protos < 2:
        raise ValueError("a prototype system needs at least 2 prototypes")
    if classes.shape != (n_protos,):
        raise ValueError("one class label per prototype is required")
    if encoder.shape[1] != latent or decoder.shape != (latent, encoder.shape[0]):
        raise ValueError(
            f"encoder {encoder.shape} / decoder {decoder.shape} do not match latent dim {latent}"
        )
    if distance not in DISTANCES:
        raise ValueError(f"unknown distance '{distance}'")
    if n_classes is None:
        n_classes = int(classes.max()) + 1
    if classes.min() < 0 or classes.max() >= n_classes:
        raise ValueError(f"prototype classes must lie in [0, {n_classes})")
    encoder_bias = np.zeros(latent) if encoder_bias is None else np.asarray(encoder_bias, float)
    decoder_bias = (
        np.zeros(encoder.shape[0]) if decoder_bias is None else np.asarray(decoder_bias, float)
    )
    return PrototypeSystem(
        prototypes, classes, int(n_classes), encoder, encoder_bias, decoder,
        decoder_bias, distance,
    )


def fit_prototype_system(dataset, n_prototypes, latent_dim, ridge, jitter, seed):
    """Affine encoder/decoder plus class-mean prototypes for `dataset`.

    The encoder is a seeded random projection of the centered inputs; the
    decoder is the closed-form ridge regression of the inputs on their
    latents. Prototype i has class i % b and sits at its class-mean latent
    plus seeded Gaussian jitter.
    """
    rng = np.random.default_rng(seed)
    inputs = dataset.inputs
    mean = inputs.mean(axis=0)
    encoder = rng.standard_normal((dataset.dim, latent_dim)) / np.sqrt(dataset.dim)
    encoder_bias = -mean @ encoder

    latents = inputs @ encoder + encoder_bias
    gram = latents.T @ latents
    penalty = ridge * np.trace(gram) / latent_dim
    decoder = solve_linear(gram + penalty * np.eye(latent_dim), latents.T @ (inputs - mean))
    decoder_bias = mean

    classes = np.arange(n_prototypes) % dataset.n_classes
    centers = np.stack([
        latents[dataset.labels == c].mean(axis=0) if np.any(dataset.labels == c)
        else np.zeros(latent_dim)
        for c in range(dataset.n_classes)
    ])
    scale = latents.std()
    prototypes = centers[classes] + jitter * scale * rng.standard_normal((n_prototypes, latent_dim))
    return make_prototype_system(
        prototypes, classes, encoder, decoder, encoder_bias, decoder_bias,
        n_classes=dataset.n_classes,
    )


def _distances(sys, z):
    sq = ((sys.prototypes - np.asarray(z)[None, :]) ** 2).sum(axis=1)
    if sys.distance == "squared_euclidean":
        return sq
    return np.sqrt(sq)


def nearest_prototype(sys, z, exclude=None):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent vector has non-finite entries")
    dist = _distances(sys, z)
    if exclude is not None:
        if len(sys) < 2:
            raise EmptyCandidateSet("no prototype left after exclusion")
        dist[exclude] = np.inf
    # argmin returns the first minimum, i.e. the lowest index among ties
    return int(np.argmin(dist))


def reconstruct(sys, p):
    """[e o d](p): decode prototype p and encode it again."""
    return sys.encode(sys.decode(sys.prototypes[p]))


def transition(sys, p, exclude_self=False):
    if not 0 <= p < len(sys):
        raise IndexError(f"prototype {p} outside [0, {len(sys)})")
    return nearest_prototype(sys, reconstruct(sys, p), exclude=p if exclude_self else None)


def transitions(sys, exclude_self=False):
    return [transition(sys, p, exclude_self) for p in range(len(sys))]


def self_consistency_report(sys):
    flags = [transition(sys, p) == p for p in range(len(sys))]
    return {"flags": flags, "fraction": sum(flags) / len(flags)}


def decompose_functional_graph(next_of):
    """Cycles, tail lengths and cycle membership of a map i -> next_of[i]."""
    n = len(next_of)
    state = [0] * n  # 0 unseen, 1 on current path, 2 finished
    cycle_of = [-1] * n
    tail = [0] * n
    cycles = []
    for start in range(n):
        if state[start]:
            continue
        path = []
        node = start
        while state[node] == 0:
            state[node] = 1
            path.append(node)
            node = next_of[node]
        if state[node] == 1:
            # closed a new cycle on the current path
            at = path.index(node)
            cycle = path[at:]
            rot = cycle.index(min(cycle))
            cycles.append(tuple(cycle[rot:] + cycle[:rot]))
            for c in cycle:
                cycle_of[c] = len(cycles) - 1
                tail[c] = 0
                state[c] = 2
            path = path[:at]
        for node in reversed(path):
            successor = next_of[node]
            cycle_of[node] = cycle_of[successor]
            tail[node] = tail[successor] + 1
            state[node] = 2
    return cycles, tail, cycle_of


def build_digraph(sys, exclude_self=False):
    next_of = transitions(sys, exclude_self)
    cycles, tail, cycle_of = decompose_functional_graph(next_of)
    return TransitionOutcome(tuple(next_of), tuple(cycles), tuple(tail), tuple(cycle_of))


def as_networkx(outcome):
    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(outcome.next)))
    graph.add_edges_from(enumerate(outcome.next))
    return graph


def count_components(outcome):
    return nx.number_weakly_connected_components(as_networkx(outcome))


def components_have_one_cycle(outcome):
    """Check that every weakly connected component holds exactly one cycle."""
    graph = as_networkx(outcome)
    for component in nx.weakly_connected_components(graph):
        n_cycles = len({outcome.cycle_of[i] for i in component})
        on_cycles = sum(1 for c in outcome.cycles if c[0] in component)
        if n_cycles != 1 or on_cycles != 1:
            return False
    return True


def class_preservation_condition(sys, klass, exclude_self=False):
    """Sufficient distance condition for recursions to stay inside `klass`.

    For every p of the class, the reconstruction of p must be at least as
    close to the class (minus p itself when exclude_self) as to any prototype
    of another class.
    """
    members = np.flatnonzero(sys.classes == klass)
    if members.size == 0:
        raise EmptyClass(f"class {klass} has no prototypes")
    others = np.flatnonzero(sys.classes != klass)
    for p in members:
        dist = _distances(sys, reconstruct(sys, p))
        inside = members[members != p] if exclude_self else members
        lhs = dist[inside].min() if inside.size else np.inf
        rhs = dist[others].min() if others.size else np.inf
        if not lhs <= rhs:
            return False
    return True


def classify_by_prototype(sys, x):
    """Class of the nearest prototype to the encoding of x."""
    return int(sys.classes[nearest_prototype(sys, sys.encode(x))])


def explain_input(sys, x):
    return nearest_prototype(sys, sys.encode(x))


def prototype_prediction(sys, p):
    distribution = np.zeros(sys.n_classes)
    distribution[sys.classes[p]] = 1.0
    return Prediction(int(sys.classes[p]), distribution, distribution.copy())


def write_prototypes(path, sys):
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(
            ["proto_id", "class"] + [f"latent_{i}" for i in range(sys.latent_dim)]
        )
        for i, (z, c) in enumerate(zip(sys.prototypes, sys.classes)):
            writer.writerow([i, int(c)] + [format_float(v) for v in z])


def read_prototypes(path):
    """Read a prototype CSV; returns (latents, classes) ordered by proto_id."""
    with open(path, "r", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows or rows[0][:2] != ["proto_id", "class"]:
        raise InputFileError(path, "header must start with proto_id,class")
    width = len(rows[0])
    entries = []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != width:
            raise InputFileError(path, f"line {lineno}: expected {width} fields, got {len(r)}")
        try:
            entries.append((int(r[0]), int(r[1]), [float(v) for v in r[2:]]))
        except ValueError as e:
            raise InputFileError(path, f"line {lineno}: {e}")
    entries.sort()
    if [e[0] for e in entries] != list(range(len(entries))):
        raise InputFileError(path, "proto_id must run 0..n-1")
    return np.array([e[2] for e in entries]), np.array([e[1] for e in entries])


def with_prototypes(sys, prototypes, classes):
    return make_prototype_system(
        prototypes, classes, sys.encoder, sys.decoder, sys.encoder_bias,
        sys.decoder_bias, n_classes=sys.n_classes, distance=sys.distance,
    )


def class_preserved_from(sys, start, exclude_self, budget=None):
    """Follow the transitions from prototype `start` until a repeat and
    report whether every visited prototype has the class of `start`."""
    klass = sys.classes[start]
    seen = []
    p = start
    while p not in seen:
        if sys.classes[p] != klass:
            return False
        seen.append(p)
        p = transition(sys, p, exclude_self)
        if budget is not None and len(seen) > budget:
            break
    return True
