import numpy as np
import pytest

from koopmpc.gains import GainResult, NoConvergence, NotStabilizing, dlqr, spectral_radius
from oracles import numerical_example_matrices, scalar_dare_root


def test_spectral_radius_diagonal():
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9, abs=1e-12)


def test_spectral_radius_scaled_rotation():
    theta = 0.73
    rot = 0.7 * np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    assert spectral_radius(rot) == pytest.approx(0.7, abs=1e-10)


def test_spectral_radius_open_loop_benchmark():
    A, _ = numerical_example_matrices(-0.1, 2.0)
    assert spectral_radius(A) == pytest.approx(2.0, abs=1e-10)


def test_spectral_radius_rejects_nonsquare():
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((2, 3)))


def test_dlqr_scalar_matches_quadratic_formula():
    # Closed-form oracle: positive root of P^2 - 0.25 P - 1 = 0.
    p_expected = scalar_dare_root(0.5, 1.0, 1.0, 1.0)
    assert p_expected == pytest.approx(1.1327822185373186, abs=1e-12)

    res = dlqr(np.array([[0.5]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    p = res.riccati_P[0, 0]
    k = res.K[0, 0]
    assert p == pytest.approx(p_expected, abs=1e-9)
    assert p == pytest.approx(1.13278, abs=1e-5)
    assert k == pytest.approx(-0.5 * p_expected / (1.0 + p_expected), abs=1e-9)
    assert k == pytest.approx(-0.26556, abs=1e-5)
    assert 0.5 + k == pytest.approx(0.23444, abs=1e-5)
    assert res.spectral_radius_AK == pytest.approx(0.5 + k, abs=1e-10)


def test_dlqr_deadbeat_plant_needs_no_feedback():
    res = dlqr(np.zeros((2, 2)), np.array([[1.0], [0.5]]), np.eye(2), np.eye(1))
    assert np.allclose(res.K, 0.0, atol=1e-12)
    assert res.spectral_radius_AK == pytest.approx(0.0, abs=1e-12)


def test_dlqr_uncontrollable_unstable_raises():
    with pytest.raises(NotStabilizing):
        dlqr(np.array([[2.0]]), np.array([[0.0]]), np.eye(1), np.eye(1))


def test_dlqr_benchmark_closed_loop_spectrum():
    # Only x2 is controllable; its scalar subproblem (a=2, b=1, q=r=1) has
    # P = 2 + sqrt(5) and closed-loop pole a*r/(r + P) = (3 - sqrt(5))/2.
    # The x1 and x3 modes are untouched, so the spectrum is known exactly.
    A, B = numerical_example_matrices(-0.1, 2.0)
    res = dlqr(A, B, np.eye(3), np.eye(1))
    pole = (3.0 - np.sqrt(5.0)) / 2.0
    eigs = np.sort(np.abs(np.linalg.eigvals(A + B @ res.K)))
    assert np.allclose(eigs, np.sort(np.abs([-0.1, pole, 0.01])), atol=1e-9)
    assert res.spectral_radius_AK == pytest.approx(pole, abs=1e-9)

    p2 = scalar_dare_root(2.0, 1.0, 1.0, 1.0)
    assert p2 == pytest.approx(2.0 + np.sqrt(5.0), abs=1e-12)
    assert res.K[0, 1] == pytest.approx(-2.0 * p2 / (1.0 + p2), abs=1e-8)


def test_dlqr_riccati_residual_small():
    rng = np.random.default_rng(7)
    A = 0.9 * rng.standard_normal((4, 4)) / 2
    B = rng.standard_normal((4, 2))
    res = dlqr(A, B, np.eye(4), np.eye(2), tol=1e-12)
    P = res.riccati_P
    S = np.eye(2) + B.T @ P @ B
    back = np.eye(4) + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
    assert np.max(np.abs(P - back)) <= 10 * 1e-12
    # P must be symmetric positive definite.
    assert np.allclose(P, P.T, atol=1e-12)
    assert np.linalg.eigvalsh(P).min() > 0


def test_dlqr_error_dynamics_contract():
    A, B = numerical_example_matrices(-0.1, 2.0)
    res = dlqr(A, B, np.eye(3), np.eye(1))
    AK = A + B @ res.K
    rng = np.random.default_rng(3)
    for _ in range(5):
        e = rng.standard_normal(3)
        e0 = np.linalg.norm(e)
        for _ in range(50):
            e = AK @ e
        assert np.linalg.norm(e) < 1e-3 * e0


def test_dlqr_rejects_indefinite_weights():
    with pytest.raises(ValueError):
        dlqr(np.eye(2) * 0.5, np.eye(2), np.diag([1.0, -1.0]), np.eye(2))
    with pytest.raises(ValueError):
        dlqr(np.eye(2) * 0.5, np.eye(2), np.eye(2), np.zeros((2, 2)))


def test_dlqr_no_convergence_budget():
    A = np.array([[0.999]])
    with pytest.raises(NoConvergence):
        dlqr(A, np.array([[1.0]]), np.eye(1), np.eye(1), tol=1e-15, max_iter=2)


def test_gain_result_validates_its_invariants():
    with pytest.raises(ValueError):
        GainResult(K=np.zeros((1, 1)), riccati_P=np.eye(1), spectral_radius_AK=1.5)
    with pytest.raises(ValueError):
        GainResult(K=np.zeros((1, 1)), riccati_P=-np.eye(1), spectral_radius_AK=0.5)
