import math

import numpy as np
import pytest

from fixedpoint_tools.errors import InputFileError, NonFinite, NonSquare, Singular
from fixedpoint_tools.linalg import (
    as_spectrum,
    condition_number,
    inverse,
    make_matrix_with_spectrum,
    operator_norm,
    read_matrix,
    solve_linear,
    spectral_radius_estimate,
    write_matrix,
)


def squaring_oracle(m, rounds=40):
    # ||M^(2^r)||^(1/2^r), scale kept in log space
    p = np.array(m, dtype=float)
    log_scale = 0.0
    for _ in range(rounds):
        s = np.abs(p).max()
        if s == 0:
            return 0.0
        p = p / s
        log_scale = 2.0 * (log_scale + math.log(s))
        p = p @ p
    return math.exp((log_scale + math.log(np.linalg.norm(p, 2))) / 2 ** rounds)


def test_spectral_radius_diagonal():
    assert abs(spectral_radius_estimate(np.diag([0.5, -2.0, 1.0])) - 2.0) < 1e-9


def test_spectral_radius_rotation():
    c, s = math.cos(0.7), math.sin(0.7)
    assert abs(spectral_radius_estimate([[c, -s], [s, c]]) - 1.0) < 1e-9


def test_spectral_radius_zero_and_nilpotent():
    assert spectral_radius_estimate(np.zeros((3, 3))) == 0.0
    assert spectral_radius_estimate([[0.0, 1.0], [0.0, 0.0]]) == 0.0


@pytest.mark.parametrize("seed", range(50))
def test_spectral_radius_matches_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    norms = np.sort(rng.uniform(0.1, 2.0, size=6))[::-1]
    if seed % 2:
        norms[1] = norms[0]
    m = make_matrix_with_spectrum(6, norms, seed, complex_pairs=seed % 2)
    expected = squaring_oracle(m)
    assert abs(spectral_radius_estimate(m) - expected) <= 1e-5 * expected
    assert abs(expected - np.abs(np.linalg.eigvals(m)).max()) <= 1e-5 * expected


def test_spectral_radius_rejects_bad_input():
    with pytest.raises(NonSquare):
        spectral_radius_estimate(np.ones((2, 3)))
    with pytest.raises(NonFinite):
        spectral_radius_estimate([[1.0, float("nan")], [0.0, 1.0]])


@pytest.mark.parametrize("seed", range(10))
def test_solve_linear(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    x = rng.normal(size=5)
    assert np.allclose(solve_linear(a, a @ x), x, atol=1e-9)
    xs = rng.normal(size=(5, 3))
    assert np.allclose(solve_linear(a, a @ xs), xs, atol=1e-9)


def test_solve_linear_singular():
    with pytest.raises(Singular):
        solve_linear([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0])


def test_inverse_and_condition():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    assert np.allclose(inverse(a) @ a, np.eye(2), atol=1e-12)
    assert condition_number(np.eye(4)) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_operator_norm(seed):
    m = np.random.default_rng(seed).normal(size=(4, 7))
    assert abs(operator_norm(m) - np.linalg.norm(m, 2)) < 1e-8


def test_as_spectrum_sorts_descending():
    assert list(as_spectrum([0.2, 1.5, 0.7])) == [1.5, 0.7, 0.2]
    with pytest.raises(ValueError):
        as_spectrum([-1.0])


@pytest.mark.parametrize("seed", range(10))
def test_make_matrix_with_spectrum(seed):
    norms = [1.8, 1.2, 0.9, 0.4, 0.1]
    m, kappa = make_matrix_with_spectrum(5, norms, seed, with_condition=True)
    got = np.sort(np.abs(np.linalg.eigvals(m)))[::-1]
    assert np.allclose(got, norms, rtol=1e-6)
    assert 1.0 <= kappa <= 1e6


def test_make_matrix_with_spectrum_is_seeded():
    a = make_matrix_with_spectrum(4, [0.9, 0.5, 0.3, 0.2], 11)
    b = make_matrix_with_spectrum(4, [0.9, 0.5, 0.3, 0.2], 11)
    assert np.array_equal(a, b)


def test_complex_pairs_and_signs():
    m = make_matrix_with_spectrum(4, [0.8, 0.8, 0.5, 0.2], 3, complex_pairs=1)
    eig = np.linalg.eigvals(m)
    assert np.sum(np.abs(eig.imag) > 1e-6) == 2
    m = make_matrix_with_spectrum(3, [1.0, 0.3, 0.3], 3, signs=[1, 1, 1])
    eig = np.linalg.eigvals(m)
    assert np.allclose(np.sort(eig.real), [0.3, 0.3, 1.0], atol=1e-8)
    with pytest.raises(ValueError):
        make_matrix_with_spectrum(4, [0.8, 0.6, 0.5, 0.2], 3, complex_pairs=1)


def test_matrix_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(3, 4)) / 3.0
    path = str(tmp_path / "m.csv")
    write_matrix(path, m)
    assert np.array_equal(read_matrix(path), m)


@pytest.mark.parametrize("text", [
    "",
    "2,2\n1.0,0.0\n",
    "1,2\n1.0,abc\n",
    "1,2\n1.0,nan\n",
    "1,2\n1.0,0.0,3.0\n",
])
def test_read_matrix_rejects_bad_files(tmp_path, text):
    path = tmp_path / "m.csv"
    path.write_text(text)
    with pytest.raises(InputFileError):
        read_matrix(str(path))


@pytest.mark.parametrize("seed", range(20))
def test_spectral_radius_is_similarity_invariant(seed):
    rng = np.random.default_rng(seed)
    norms = np.sort(rng.uniform(0.1, 2.0, size=5))[::-1]
    m = make_matrix_with_spectrum(5, norms, seed)
    basis = rng.normal(size=(5, 5)) + 3 * np.eye(5)
    moved = basis @ m @ inverse(basis)
    radius = spectral_radius_estimate(m)
    assert abs(spectral_radius_estimate(moved) - radius) <= 1e-5 * radius


def orbit_norms(m, v, steps):
    # 1-norms of M^k v; the basis condition number bounds their growth in this norm
    norms = [np.abs(v).sum()]
    for _ in range(steps):
        v = m @ v
        norms.append(np.abs(v).sum())
    return norms


@pytest.mark.parametrize("seed", range(20))
def test_contractive_orbit_decays_within_condition_bound(seed):
    rng = np.random.default_rng(seed)
    m, kappa = make_matrix_with_spectrum(
        6, rng.uniform(0.1, 0.9, size=6), seed, with_condition=True
    )
    norms = orbit_norms(m, rng.normal(size=6), 200)
    assert norms[200] <= 1e-6 * norms[0] * kappa


@pytest.mark.parametrize("seed", range(20))
def test_unit_spectrum_orbit_stays_bounded(seed):
    rng = np.random.default_rng(seed)
    spectrum = np.concatenate([[1.0, 1.0], rng.uniform(0.1, 1.0, size=4)])
    m, kappa = make_matrix_with_spectrum(6, spectrum, seed, with_condition=True)
    norms = orbit_norms(m, rng.normal(size=6), 500)
    assert max(norms) <= (1.0 + 1e-6) * kappa * norms[0]
