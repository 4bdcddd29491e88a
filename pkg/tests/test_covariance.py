import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diractraj import covariance as cov
from diractraj.reference import gaussian_packet_field, spectral_propagate

eps_s = st.tuples(*(st.floats(-5e-3, 5e-3) for _ in range(3))).filter(lambda e: np.linalg.norm(e) > 1e-5)


@pytest.fixture(scope="module")
def report():
    return cov.plane_wave_covariance_report(eps=(1e-3, 0.0, 0.0), halvings=1)


@pytest.fixture(scope="module")
def oblique_report():
    return cov.plane_wave_covariance_report(eps=(6e-4, -5e-4, 5e-4), halvings=1)


def test_boost_parameter_bounds():
    with pytest.raises(ValueError):
        cov.BoostParams((0.02, 0.0, 0.0))
    with pytest.raises(ValueError):
        cov.BoostParams((1e-3, 0.0))


@given(eps_s)
def test_exact_coordinate_map_inverts(eps):
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(5, 3)), rng.normal(size=5)
    xp, tp = cov.boost_coordinates(x, t, eps, exact=True)
    xb, tb, _ = cov.inverse_boost_coordinates(xp, tp, eps, exact=True)
    np.testing.assert_allclose(xb, x, atol=1e-12)
    np.testing.assert_allclose(tb, t, atol=1e-12)


@given(eps_s)
def test_first_order_spinor_boost_matches_exact_to_second_order(eps):
    diff = np.abs(cov.spinor_boost(eps) - cov.spinor_boost(eps, exact=True)).max()
    assert diff <= np.dot(eps, eps)


def test_exact_boost_preserves_field_equation():
    st_ = cov.PlaneWaveState(k=(0.3, 0.0, -0.2))
    rng = np.random.default_rng(1)
    r = cov.form_invariance_residual(st_, (3e-3, 1e-3, 0.0), rng.normal(size=(10, 3)), rng.normal(size=10),
                                     exact=True)
    assert r < 1e-12


def test_mode_sum_state_matches_spectral_propagation():
    f = gaussian_packet_field(12, 10.0, 1.5)
    state = cov.ModeSumState(f)
    g = spectral_propagate(f, 0.4)
    idx = np.array([[0, 3, 5], [6, 6, 6], [11, 2, 7]])
    x = idx * f.spacing
    psi, _, _ = state.evaluate(x, np.full(3, 0.4))
    np.testing.assert_allclose(psi, g.values[tuple(idx.T)], atol=1e-13)


@pytest.mark.parametrize("which", ["report", "oblique_report"])
def test_first_order_residuals_scale_quadratically(which, request):
    rep = request.getfixturevalue(which)
    for group in ("spatial", "material"):
        for name, entry in rep[group].items():
            assert entry["pass"], (group, name, entry)
    assert rep["pass"]


def test_label_condition_is_second_order(report):
    lab = report["material"]["label_condition"]
    for r in lab["ratios"]:
        assert r is None or 3.5 <= r <= 4.5


def test_boosted_speeds_stay_superluminal(report):
    assert report["min_boosted_speed_over_c"] >= 1 - 1e-9


def test_material_identity_is_independent_of_boost(report):
    assert report["identity_residual"] < 1e-8


def test_scaling_study_flags_exact_pairs():
    rep, ok = cov.scaling_study(lambda b: {"zero": 0.0, "quad": b.speed**2}, (1e-3, 0, 0), halvings=2)
    assert ok and rep["zero"]["exact"]
    assert rep["quad"]["ratios"] == pytest.approx([4.0, 4.0])
