import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diractraj import angular as ang
from diractraj.errors import NodeSingularity, StepTooLarge
from diractraj.params import DEFAULT_PARAMS, PhysicalParams
from diractraj.reference import SpectralOracle, gaussian_packet_field, plane_wave_field
from diractraj.spinor import majorana_split
from diractraj.trajectory import (
    LabelGrid,
    angle_flow,
    deformation_identities_check,
    evolution_operator,
    integrate_bundle,
    plane_wave_amplitude,
    plane_wave_paths,
    reconstruct_dirac,
    speed_via_bound_formula,
    velocity,
)

from conftest import random_angles

SMALL_NODES = ang.AngularNodes(2, 2, 4)


@pytest.fixture(scope="module")
def plane_wave_pair():
    grid = LabelGrid(4, 20.0, SMALL_NODES, plane_wave_field(4, 20.0))
    T = 0.25 * np.pi
    return [integrate_bundle(grid, mode="self_contained", dt=0.005, T=T, branch=b, record_every=25) for b in "RI"]


@pytest.fixture(scope="module")
def packet_pair():
    f = gaussian_packet_field(16, 12.0, 1.5, polarization=(1, 0, 0, 2j))
    orc = SpectralOracle(f)
    grid = LabelGrid(6, 12.0, SMALL_NODES, f)
    bs = [integrate_bundle(grid, mode="validation", dt=0.025, T=0.2, branch=b, oracle=orc, on_collapse="flag",
                           step_tol=1e-5) for b in "RI"]
    return f, orc, bs


def test_evolution_operator_is_unitary_and_periodic():
    p = DEFAULT_PARAMS
    U = evolution_operator(0.37, p)
    np.testing.assert_allclose(U @ U.conj().T, np.eye(4), atol=1e-15)
    np.testing.assert_allclose(evolution_operator(4 * np.pi / p.omega, p), np.eye(4), atol=1e-14)


def test_angle_flow_drifts_gamma_only():
    th = np.array([[1.0, 2.0, 3.0]])
    out = angle_flow(th, 0.5)
    assert out[0, 0] == 1.0 and out[0, 1] == 2.0
    assert out[0, 2] == pytest.approx(np.mod(3.0 - DEFAULT_PARAMS.omega * 0.5, 4 * np.pi))


@given(st.integers(0, 2**31 - 1))
def test_speed_is_never_subluminal(seed):
    rng = np.random.default_rng(seed)
    phi = majorana_split(rng.normal(size=4) + 1j * rng.normal(size=4))[0]
    th = random_angles(rng, 1)[0]
    v = velocity(phi, th)
    assert np.linalg.norm(v) >= 1.0 - 1e-9
    assert speed_via_bound_formula(phi, th) == pytest.approx(np.linalg.norm(v), rel=1e-9)


def test_speed_scales_with_c(rng):
    phi = majorana_split(rng.normal(size=4) + 1j * rng.normal(size=4))[0]
    th = random_angles(rng, 1)[0]
    v1 = velocity(phi, th)
    v3 = velocity(phi, th, PhysicalParams(c=3.0))
    np.testing.assert_allclose(v3, 3 * v1, rtol=1e-13)


def test_velocity_at_a_node_raises():
    # e_1 density vanishes where cos(alpha / 2) = 0 ... pick a spinor with a zero at a regular point
    th = np.array([1.0, 0.5, 0.7])
    u = ang.basis_u(th)
    phi = majorana_split(np.array([u[1], -u[0], 0, 0]).conj() * 0 + np.array([1, 0, 0, 1], complex))[0]
    dens = u @ phi
    phi_node = phi - dens * np.conj(u) / np.vdot(u, u).real
    with pytest.raises(NodeSingularity):
        velocity(phi_node, th)


def test_plane_wave_paths_match_closed_form(plane_wave_pair):
    b = plane_wave_pair[0]
    # nodes on the secant singularity carry zero density and are flagged at the start
    live = np.all(b.kept(), axis=1)
    assert live.any()
    th0 = b.theta0[live]
    amp = plane_wave_amplitude(th0)[:, None]
    for k, t in enumerate(b.times):
        exact = plane_wave_paths(b.q0[None], th0[:, None, :], t)
        err = np.linalg.norm(b.q[k][live] - exact, axis=-1) / amp
        assert err.max() < 1e-9
    assert np.abs(b.J[:, b.kept()] - 1).max() < 1e-9
    assert b.stats["min_speed_over_c"] >= 1 - 1e-9


def test_plane_wave_reconstruction_returns_rest_state(plane_wave_pair):
    br, bi = plane_wave_pair
    t = float(br.times[-1])
    psi, rep = reconstruct_dirac(br, bi, t)
    expect = np.array([np.exp(-0.5j * DEFAULT_PARAMS.omega * t), 0, 0, 0])
    assert np.abs(psi.values - expect).max() < 1e-6
    assert rep["R"]["uncovered_pairs"] + rep["I"]["uncovered_pairs"] > 0  # flagged nodes drop out


def test_step_limit_enforced():
    grid = LabelGrid(2, 20.0, SMALL_NODES, plane_wave_field(2, 20.0))
    with pytest.raises(StepTooLarge):
        integrate_bundle(grid, dt=0.1, T=1.0)


def test_validation_bundle_conserves_and_reconstructs(packet_pair):
    f, orc, (br, bi) = packet_pair
    for b in (br, bi):
        assert b.stats["conservation_fraction_1e-6"] >= 0.99
        assert b.stats["min_speed_over_c"] >= 1 - 1e-9
    psi, _ = reconstruct_dirac(br, bi, 0.2, 16)
    ref = orc.field_at(0.2).values
    assert np.linalg.norm(psi.values - ref) / np.linalg.norm(ref) < 0.05


def test_deformation_identities_hold(packet_pair):
    rep = deformation_identities_check(packet_pair[2][0])
    assert rep["adjugate_relation"] < 1e-10
    assert rep["determinant_formula"] < 1e-10


def test_self_contained_and_validation_agree_on_plane_wave(plane_wave_pair):
    b = plane_wave_pair[0]
    grid = LabelGrid(4, 20.0, SMALL_NODES, plane_wave_field(4, 20.0))
    v = integrate_bundle(grid, mode="validation", dt=0.005, T=float(b.times[-1]), branch="R", record_every=25)
    keep = v.kept() & b.kept()
    assert np.abs(v.q[-1][keep] - b.q[-1][keep]).max() < 1e-9


def test_label_grid_rejects_mismatched_box():
    with pytest.raises(ValueError):
        LabelGrid(4, 10.0, SMALL_NODES, plane_wave_field(4, 20.0))
