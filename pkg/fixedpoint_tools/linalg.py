"""Dense matrix helpers: spectral radius, linear solves and matrices with a
prescribed spectrum.

Matrices are 2-D float64 numpy arrays. Vectors are row vectors and maps act by
right-multiplication, `x @ m`, as the recursive SAE does.
"""
import csv
import math

import numpy as np
import tenacity

from .errors import InputFileError, NonFinite, NonSquare, Singular, SingularBasis
from .metadata import CONDITION_LIMIT, MAX_BASIS_ATTEMPTS, PIVOT_TOL
from .utils import format_float


def as_matrix(m, square=False):
    m = np.array(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if square and m.shape[0] != m.shape[1]:
        raise NonSquare(f"matrix of shape {m.shape} is not square")
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix has non-finite entries")
    return m


def as_spectrum(spectrum):
    norms = np.array(spectrum, dtype=np.float64).ravel()
    if not np.all(np.isfinite(norms)):
        raise NonFinite("spectrum has non-finite eigen norms")
    if np.any(norms < 0):
        raise ValueError("eigen norms must be non-negative")
    return np.sort(norms)[::-1]


def start_vector(dim, seed):
    """All-ones unit vector with a small seeded perturbation."""
    rng = np.random.default_rng(seed)
    x = np.ones(dim) / math.sqrt(dim)
    x = x + 1e-3 * rng.standard_normal(dim)
    return x / np.linalg.norm(x)


def spectral_radius_estimate(m, max_iters=64, tol=1e-12, seed=0):
    """Estimate max |eigenvalue| of `m` by power iteration.

    The start vector is pushed through M^N with N doubling every iteration
    (repeated squaring of a normalized power), and the radius is read off the
    growth rate ||x M^N||^(1/N). Only norms are used, so complex and
    negative dominant eigenvalues need no special handling.
    """
    m = as_matrix(m, square=True)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")

    x = start_vector(m.shape[0], seed)
    power = m.copy()
    log_scale = 0.0
    exponent = 1.0
    estimate = None
    for _ in range(max_iters):
        scale = np.abs(power).max()
        if scale == 0.0:
            return 0.0
        power /= scale
        log_scale += math.log(scale)

        growth = np.linalg.norm(x @ power)
        if growth == 0.0:
            # start vector hit the null space; fall back to the matrix norm
            growth = np.abs(power).max()
        new_estimate = math.exp((log_scale + math.log(growth)) / exponent)

        if estimate is not None and abs(new_estimate - estimate) <= tol * max(1.0, estimate):
            return new_estimate
        estimate = new_estimate

        power = power @ power
        log_scale *= 2.0
        exponent *= 2.0
        if not np.all(np.isfinite(power)):
            break

    return estimate


def operator_norm(m, max_iters=64, tol=1e-12, seed=0):
    """Spectral (2-)norm of a possibly rectangular matrix."""
    m = as_matrix(m)
    gram = m.T @ m
    return math.sqrt(spectral_radius_estimate(gram, max_iters=max_iters, tol=tol, seed=seed))


def solve_linear(m, rhs):
    """Solve m x = rhs by Gaussian elimination with partial pivoting.

    `rhs` may be a vector or a matrix of right-hand-side columns.
    """
    a = as_matrix(m, square=True)
    b = np.array(rhs, dtype=np.float64)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {n}")
    if not np.all(np.isfinite(b)):
        raise NonFinite("rhs has non-finite entries")

    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot, col]) < PIVOT_TOL:
            raise Singular(f"pivot {a[pivot, col]:.3e} in column {col}")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= np.outer(factors, a[col, col:])
        if b.ndim == 1:
            b[col + 1:] -= factors * b[col]
        else:
            b[col + 1:] -= np.outer(factors, b[col])

    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def inverse(m):
    m = as_matrix(m, square=True)
    return solve_linear(m, np.eye(m.shape[0]))


def condition_number(m):
    """1-norm condition number ||m||_1 ||m^-1||_1."""
    m = as_matrix(m, square=True)
    inv = inverse(m)
    return float(np.abs(m).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())


@tenacity.retry(
    stop=tenacity.stop_after_attempt(MAX_BASIS_ATTEMPTS),
    retry=tenacity.retry_if_exception_type(SingularBasis),
    reraise=True,
)
def _draw_basis(rng, dim):
    basis = rng.standard_normal((dim, dim))
    try:
        basis_inv = inverse(basis)
    except Singular as e:
        raise SingularBasis(str(e))
    kappa = float(
        np.abs(basis).sum(axis=0).max() * np.abs(basis_inv).sum(axis=0).max()
    )
    if kappa > CONDITION_LIMIT:
        raise SingularBasis(f"basis condition {kappa:.3e} exceeds {CONDITION_LIMIT:.0e}")
    return basis, basis_inv, kappa


def _spectrum_block(norms, signs, complex_pairs, rng):
    dim = len(norms)
    sigma = np.zeros((dim, dim))
    for pair in range(complex_pairs):
        i = 2 * pair
        r = norms[i]
        if abs(norms[i + 1] - r) > 1e-12:
            raise ValueError(
                f"complex pair {pair} needs equal norms, got {norms[i]} and {norms[i + 1]}"
            )
        theta = rng.uniform(0.1, math.pi - 0.1)
        c, s = math.cos(theta), math.sin(theta)
        sigma[i:i + 2, i:i + 2] = [[r * c, -r * s], [r * s, r * c]]
    for i in range(2 * complex_pairs, dim):
        sigma[i, i] = signs[i] * norms[i]
    return sigma


def make_matrix_with_spectrum(
    dim, spectrum, seed, signs=None, complex_pairs=0, with_condition=False
):
    """Build M = A S A^-1 whose eigenvalues have the requested norms.

    S is diagonal with the norms and random signs, except that the first
    `complex_pairs` pairs of (equal) norms become 2x2 rotation-scaling blocks.
    A is a seeded Gaussian basis, redrawn while singular or worse conditioned
    than CONDITION_LIMIT. With `with_condition` the basis condition number is
    returned too; it bounds the transient growth of x M^k.
    """
    norms = as_spectrum(spectrum)
    if dim != len(norms):
        raise ValueError(f"dim={dim} but the spectrum has {len(norms)} norms")
    if complex_pairs < 0 or 2 * complex_pairs > dim:
        raise ValueError(f"cannot fit {complex_pairs} complex pairs in dim {dim}")

    rng = np.random.default_rng(seed)
    basis, basis_inv, kappa = _draw_basis(rng, dim)
    if signs is None:
        signs = rng.choice([-1.0, 1.0], size=dim)
    else:
        signs = np.asarray(signs, dtype=np.float64)
        if signs.shape != (dim,):
            raise ValueError(f"expected {dim} signs")
    sigma = _spectrum_block(norms, signs, complex_pairs, rng)

    m = basis @ sigma @ basis_inv
    if with_condition:
        return m, kappa
    return m


def write_matrix(path, m):
    m = as_matrix(m)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow([m.shape[0], m.shape[1]])
        for row in m:
            writer.writerow([format_float(v) for v in row])


def read_matrix(path):
    with open(path, "r", newline="") as fp:
        rows = [row for row in csv.reader(fp) if row]
    if not rows:
        raise InputFileError(path, "empty matrix file")
    try:
        n_rows, n_cols = (int(v) for v in rows[0])
        body = [[float(v) for v in row] for row in rows[1:]]
    except ValueError as e:
        raise InputFileError(path, str(e))
    if len(body) != n_rows or any(len(row) != n_cols for row in body):
        raise InputFileError(path, f"does not hold a {n_rows}x{n_cols} matrix")
    if not all(math.isfinite(v) for row in body for v in row):
        raise InputFileError(path, "matrix has non-finite entries")
    return as_matrix(np.array(body).reshape(n_rows, n_cols))
