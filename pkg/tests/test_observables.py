import numpy as np
import pytest

from diractraj import observables as obs
from diractraj.covariance import ModeSumState
from diractraj.errors import NodeCrossing
from diractraj.reference import (
    SpectralOracle,
    SpinorField,
    gaussian_packet_field,
    plane_wave_solution,
)
from diractraj.spinor import majorana_split

from conftest import random_angles


@pytest.fixture(scope="module")
def packet_series():
    f = gaussian_packet_field(24, 16.0, 1.8, polarization=(1, 0, 0, 2j))
    orc = SpectralOracle(f)
    dts = (0.04, 0.02, 0.01)
    t = 0.3
    samples = obs.node_free_samples([orc.field_at(t + s) for s in (0.0, *dts)], 150, seed=5)
    return orc, t, dts, samples


def _order(r):
    return np.log2(r[-2] / r[-1])


def test_decomposition_on_random_field(rng):
    f = SpinorField(rng.normal(size=(5, 5, 5, 4)) + 1j * rng.normal(size=(5, 5, 5, 4)), 3.0)
    rep = obs.current_decomposition_check(f)
    assert rep["pass"]
    assert rep["density_mismatch"] <= 1e-10 and rep["flux_mismatch"] <= 1e-10


def test_mean_velocity_routes_agree_and_are_superluminal(rng):
    m = 80
    coef = rng.normal(size=(m, 4)) + 1j * rng.normal(size=(m, 4))
    grad = rng.normal(size=(m, 3, 4)) + 1j * rng.normal(size=(m, 3, 4))
    pr, pi = majorana_split(coef)
    gr, gi = majorana_split(grad)
    flow = obs.mean_velocities(pr, pi, (gr, gi), random_angles(rng, m, 0.3))
    assert flow.polar_mismatch <= obs.DUAL_ROUTE_TOL
    assert np.linalg.norm(flow.v_trans, axis=1).min() >= 1 - 1e-9


def test_quantum_potential_vanishes_for_uniform_state(rng):
    m = 20
    coef = np.tile(np.array([1, 0, 0, 0], complex), (m, 1))
    Q = obs.quantum_potential(coef, np.zeros((m, 3, 4), complex), random_angles(rng, m, 0.3))
    assert np.abs(Q).max() < 1e-12


def test_plane_wave_hamilton_jacobi_closes():
    a, b = plane_wave_solution(8, 10.0, 0.0), plane_wave_solution(8, 10.0, 0.05)
    s = obs.node_free_samples([a, b], 50)
    hj, cont = obs.hj_and_continuity_residuals(a, b, 0.05, s)
    assert hj < 1e-10 and cont < 1e-10


def test_packet_residuals_converge_at_second_order(packet_series):
    orc, t, dts, samples = packet_series
    rows = {"hj": [], "cont": [], "rhoR": [], "rhoI": []}
    for dt in dts:
        a, b = orc.field_at(t), orc.field_at(t + dt)
        hj, cont = obs.hj_and_continuity_residuals(a, b, dt, samples)
        rows["hj"].append(hj)
        rows["cont"].append(cont)
        rows["rhoR"].append(obs.squared_density_residual(a, b, dt, samples, "R"))
        rows["rhoI"].append(obs.squared_density_residual(a, b, dt, samples, "I"))
    for name, r in rows.items():
        assert _order(r) >= 1.8, (name, r)


def test_typeset_reading_does_not_converge(packet_series):
    orc, t, dts, samples = packet_series
    r = [obs.hj_and_continuity_residuals(orc.field_at(t), orc.field_at(t + dt), dt, samples, reading="typeset")[0]
         for dt in dts]
    assert r[-1] > 1e-2 and _order(r) < 0.5


def test_gauge_shift_leaves_residuals_unchanged(packet_series):
    orc, t, dts, samples = packet_series
    a, b = orc.field_at(t), orc.field_at(t + dts[1])
    L = a.L
    fx = (2 * np.pi / L, -2 * np.pi / L, 0.0)
    pot = obs.gauge_shift_potential(None, ft=0.25, fx=fx)
    base = obs.hj_and_continuity_residuals(a, b, dts[1], samples)
    shifted = obs.hj_and_continuity_residuals(obs.gauge_shift(a, 1.1, 0.25, fx), obs.gauge_shift(b, 1.1, 0.25, fx),
                                              dts[1], samples, pot=pot)
    np.testing.assert_allclose(shifted, base, atol=1e-10)


def test_gauge_shift_requires_periodic_gradient(packet_series):
    with pytest.raises(ValueError):
        obs.gauge_shift(packet_series[0].field_at(0.0), fx=(0.1, 0, 0))


def test_polar_decompose_unwraps_and_detects_nodes():
    t = np.linspace(0, np.pi, 201)
    ps = obs.polar_decompose(2.0 * np.exp(1j * 3 * t))
    np.testing.assert_allclose(ps.phase, 3 * t, atol=1e-12)
    with pytest.raises(NodeCrossing):
        obs.polar_decompose(np.cos(t) + 0j)


def test_grid_phase_unwrap_on_linear_phase():
    n = 12
    x = np.arange(n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    S, flags = obs.unwrap_grid_phase(np.exp(1j * 0.4 * (X + 2 * Y - Z)))
    assert not flags.any()
    d = np.diff(S, axis=1)
    np.testing.assert_allclose(d, 0.8, atol=1e-12)


def test_path_phase_bookkeeping_converges():
    f = gaussian_packet_field(16, 12.0, 1.6, polarization=(1, 0, 0, 2j))
    st = ModeSumState(f)
    r = [obs.path_phase_check(st, [6.5, 6.0, 5.5], [1.0, 0.3, 0.2], 0.5, n)["max_residual"] for n in (10, 20)]
    assert np.log2(r[0] / r[1]) >= 1.8
