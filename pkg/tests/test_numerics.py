import math

import numpy as np
import pytest
import scipy.sparse as sp

from gapcap.numerics import (
    DenseSystem,
    InvalidTransformError,
    SingularMatrixError,
    lst_moment,
    solve,
    solve_sparse,
)


def test_identity():
    b = np.array([1.0, -2.0, 3.5])
    x = solve(DenseSystem(np.eye(3), b)).x[:, 0]
    assert np.array_equal(x, b)


def test_hand_eliminated_2x2():
    sol = solve(DenseSystem([[2.0, 1.0], [1.0, 3.0]], [3.0, 5.0]))
    assert sol.x[:, 0] == pytest.approx([0.8, 1.4], rel=1e-15)
    assert sol.max_residual < 1e-15


def test_one_phase_cycle_system():
    q, kappa = 1 / 6, 1 / 7
    rho = q + kappa
    sol = solve(DenseSystem([[1 - q / rho]], [kappa / rho]))
    assert sol.x[0, 0] == pytest.approx(1.0, rel=1e-15)


def test_two_right_hand_sides_share_factorization():
    A = np.array([[4.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 4.0]])
    B = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 0.0]])
    sol = solve(DenseSystem(A, B))
    assert np.allclose(A @ sol.x, B, rtol=0, atol=1e-14)
    assert sol.residuals.shape == (2,)


def test_singular_names_pivot():
    with pytest.raises(SingularMatrixError) as exc:
        solve(DenseSystem([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0]))
    assert exc.value.index == 1
    assert "pivot 1" in str(exc.value)


def test_bad_shapes():
    with pytest.raises(ValueError):
        DenseSystem(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        DenseSystem(np.eye(2), np.ones(3))
    with pytest.raises(ValueError):
        DenseSystem([[math.nan]], [1.0])


def test_sparse_agrees_with_dense():
    rng = np.random.default_rng(0)
    A = np.eye(50) * 4 + rng.uniform(-1, 1, (50, 50)) * (rng.random((50, 50)) < 0.05)
    b = rng.normal(size=(50, 2))
    xd = solve(DenseSystem(A, b)).x
    xs = solve_sparse(sp.csr_matrix(A), b).x
    assert np.allclose(xd, xs, rtol=1e-13, atol=1e-13)


# ---------------------------------------------------------------------------


def test_moment_of_point_mass():
    est = lst_moment(lambda s: math.exp(-7 * s), 1)
    assert est.value == pytest.approx(7, abs=1e-6)
    assert abs(est.value - 7) <= est.error


def test_second_moment_of_exponential():
    a = 1 / 7
    est = lst_moment(lambda s: a / (a + s), 2)
    assert est.value == pytest.approx(98, rel=1e-3)
    assert abs(est.value - 98) <= est.error


def test_first_moment_of_fixed_headway_service():
    q, T = 1 / 60, 7.0

    def f(s):
        u = s + q
        e = math.exp(-u * T)
        return 1.0 if s == 0 else u * e / (s + q * e)

    exact = math.expm1(q * T) / q
    est = lst_moment(f, 1)
    assert est.value == pytest.approx(exact, rel=1e-8)
    assert exact == pytest.approx(7.425, abs=5e-4)
    assert abs(est.value - exact) <= est.error


def test_error_bounds_second_moments():
    q, T = 1 / 6, 7.0

    def b1(s):
        u = s + q
        e = math.exp(-u * T)
        return 1.0 if s == 0 else u * e / (s + q * e)

    exact = 2 * math.exp(q * T) * (math.exp(q * T) - 1 - q * T) / q**2
    for f, want in ((b1, exact), (lambda s: math.exp(-3 * s), 9.0)):
        est = lst_moment(f, 2)
        assert abs(est.value - want) <= est.error
        assert est.value == pytest.approx(want, rel=1e-4)


def test_divergence_detected():
    # one-sided stable law of index 1/2: infinite mean
    est = lst_moment(lambda s: math.exp(-math.sqrt(s)), 1, mean_guess=1.0)
    assert est.is_infinite


def test_invalid_transform():
    with pytest.raises(InvalidTransformError):
        lst_moment(lambda s: 0.5 * math.exp(-s), 1)
    with pytest.raises(ValueError):
        lst_moment(lambda s: math.exp(-s), 3)
