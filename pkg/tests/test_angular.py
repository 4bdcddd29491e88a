import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diractraj import angular as ang
from diractraj.errors import PoleSingularity
from diractraj.params import PhysicalParams

from conftest import random_angles

alpha_s = st.floats(0.05, np.pi - 0.05)
beta_s = st.floats(0.0, 2 * np.pi)
gamma_s = st.floats(0.0, 4 * np.pi)


def test_identity_report_passes_with_exact_matrix_identities():
    rep = ang.verify_identities()
    assert ang.identities_passed(rep)
    for name in ("commutator_M", "commutator_MN", "anticommutator_N", "gamma_recovery"):
        assert rep[name]["residual"] == 0.0


def test_identity_report_with_non_natural_units():
    rep = ang.verify_identities(PhysicalParams(m=0.7, hbar=2.0, c=3.0))
    assert ang.identities_passed(rep)


def test_first_order_matrices_live_on_half_integer_lattice():
    for op in (o for o in ang.OPERATOR_IDS if len(o) == 2):
        m = ang.operator_matrix(op)
        assert np.array_equal(np.round(2 * m.real) / 2, m.real)
        assert np.array_equal(np.round(2 * m.imag) / 2, m.imag)


def test_unknown_operator_rejected():
    with pytest.raises(ValueError):
        ang.operator_matrix("q1")


def test_hbar_scaling_of_momentum_operators():
    p = PhysicalParams(hbar=3.0)
    assert np.array_equal(ang.operator_matrix("M2", p), 3.0 * ang.operator_matrix("M2"))
    assert np.array_equal(ang.operator_matrix("m2", p), ang.operator_matrix("m2"))


def test_total_m_squared_is_minus_three_on_spin_half():
    np.testing.assert_array_equal(ang.mm_total_matrix(), -3.0 * np.eye(4))


def test_basis_is_orthonormal_under_quadrature():
    gram = ang.angular_quadrature(lambda t: np.einsum("na,nb->nab", np.conj(ang.basis_u(t)), ang.basis_u(t)))
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-13)


@given(alpha_s, beta_s, gamma_s)
def test_rotation_is_proper_orthogonal(a, b, g):
    R = ang.euler_matrices([a, b, g]).R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(alpha_s, beta_s, gamma_s)
def test_matrix_action_matches_analytic_operator(a, b, g):
    rng = np.random.default_rng(int(1e6 * a) % 2**32)
    c = rng.normal(size=4) + 1j * rng.normal(size=4)
    th = np.array([a, b, g])
    for op in ("M3", "N1", "m2", "n1m3"):
        direct = ang.apply_operator_analytic(op, c, th)
        via_matrix = ang.basis_u(th) @ (ang.operator_matrix(op) @ c)
        assert abs(direct - via_matrix) <= 1e-9 * max(1.0, abs(via_matrix))


def test_basis_derivatives_match_finite_differences(rng):
    th = random_angles(rng, 5)
    h = 1e-6
    du = ang.basis_du(th)
    for r in range(3):
        e = np.zeros(3)
        e[r] = h
        fd = (ang.basis_u(th + e) - ang.basis_u(th - e)) / (2 * h)
        np.testing.assert_allclose(du[:, r], fd, atol=1e-8)
    d2 = ang.basis_d2u(th)
    for r in range(3):
        e = np.zeros(3)
        e[r] = h
        fd = (ang.basis_du(th + e) - ang.basis_du(th - e)) / (2 * h)
        np.testing.assert_allclose(d2[:, r], fd, atol=1e-7)


def test_rotation_derivatives_match_finite_differences(rng):
    th = random_angles(rng, 4, margin=0.3)
    dR = ang.rotation_derivs(th)
    h = 1e-6
    for r in range(3):
        e = np.zeros(3)
        e[r] = h
        fd = (ang.euler_matrices(th + e).R - ang.euler_matrices(th - e).R) / (2 * h)
        np.testing.assert_allclose(dR[:, r], fd, atol=1e-7)


def test_pole_is_rejected():
    with pytest.raises(PoleSingularity):
        ang.euler_matrices([0.0, 0.1, 0.2])


def test_euler_angles_reduce_periodic_coordinates():
    e = ang.EulerAngles(1.0, 2 * np.pi + 0.5, 4 * np.pi + 0.25)
    assert e.beta == pytest.approx(0.5)
    assert e.gamma == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ang.EulerAngles(4.0)


def test_quadrature_integrates_volume():
    vol = ang.angular_quadrature(lambda t: np.ones(len(t)), ang.AngularNodes(3, 2, 2))
    assert vol == pytest.approx(16 * np.pi**2, rel=1e-13)


def test_identity_suite_is_fast():
    rep = ang.verify_identities()
    assert rep["_meta"]["runtime_s"] < 1.0
