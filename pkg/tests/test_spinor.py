import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diractraj import spinor as sp
from diractraj.errors import MajoranaConstraintViolation

reals = st.floats(-10, 10, allow_nan=False)
spinors = arrays(np.float64, (8,), elements=reals).map(lambda x: x[:4] + 1j * x[4:])


def test_clifford_algebra():
    eta = np.diag([1.0, -1.0, -1.0, -1.0])
    for mu in range(4):
        for nu in range(4):
            anti = sp.GAMMA[mu] @ sp.GAMMA[nu] + sp.GAMMA[nu] @ sp.GAMMA[mu]
            np.testing.assert_array_equal(anti, 2 * eta[mu, nu] * np.eye(4))


def test_alpha_beta_hermitian_and_anticommuting():
    for a in sp.ALPHA:
        np.testing.assert_array_equal(a, a.conj().T)
        np.testing.assert_array_equal(a @ sp.BETA + sp.BETA @ a, np.zeros((4, 4)))


@given(spinors)
def test_split_and_join_round_trip(psi):
    r, i = sp.majorana_split(psi)
    assert sp.majorana_violation(r) <= 1e-12 * max(1, np.abs(psi).max())
    assert sp.majorana_violation(i) <= 1e-12 * max(1, np.abs(psi).max())
    np.testing.assert_allclose(sp.majorana_join(r, i), psi, atol=1e-12)


@given(spinors)
def test_conjugation_is_an_involution(psi):
    np.testing.assert_allclose(sp.conjugation_map(sp.conjugation_map(psi)), psi, atol=1e-12)


@given(arrays(np.float64, (4,), elements=reals))
def test_majorana_parameter_round_trip(x):
    phi = sp.majorana_from_params(x)
    assert sp.majorana_violation(phi) == 0.0
    np.testing.assert_array_equal(sp.majorana_params(phi), x)


def test_join_warns_on_constraint_violation():
    with pytest.warns(MajoranaConstraintViolation):
        sp.majorana_join(np.array([1, 0, 0, 0], complex), np.zeros(4))


@given(spinors)
def test_dirac_current_is_timelike_or_null(psi):
    cur = sp.dirac_current(psi)
    assert cur.density + 1e-9 >= np.linalg.norm(cur.flux)


def test_current_scales_with_c():
    psi = np.array([1, 2j, 0.5, -1], complex)
    a, b = sp.dirac_current(psi, 1.0), sp.dirac_current(psi, 3.0)
    assert b.density == pytest.approx(3 * a.density)
    np.testing.assert_allclose(b.flux, 3 * a.flux)
