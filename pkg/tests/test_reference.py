import numpy as np
import pytest

from diractraj.errors import GridMismatch, ResolutionError
from diractraj.params import PhysicalParams
from diractraj.reference import (
    PotentialField,
    SpectralOracle,
    SpinorField,
    angular_continuity_residual,
    dirac_residual,
    gaussian_packet_field,
    plane_wave_field,
    plane_wave_solution,
    spectral_gradient,
    spectral_propagate,
    spectral_tail_mass,
)


@pytest.fixture(scope="module")
def packet():
    return gaussian_packet_field(16, 10.0, 1.2, momentum=(2 * np.pi / 10.0, 0, 0), polarization=(1, 0.5j, 0, 0.3))


def test_packet_is_normalised_and_resolved(packet):
    assert packet.norm() == pytest.approx(1.0, abs=1e-14)
    assert spectral_tail_mass(packet.values, packet.L) < 1e-8


def test_momentum_must_be_commensurate():
    with pytest.raises(ValueError):
        gaussian_packet_field(16, 10.0, 1.2, momentum=(0.1, 0, 0))


def test_propagation_is_unitary_and_composable(packet):
    a = spectral_propagate(packet, 0.7)
    b = spectral_propagate(spectral_propagate(packet, 0.3), 0.4)
    assert a.norm() == pytest.approx(packet.norm(), abs=1e-13)
    np.testing.assert_allclose(a.values, b.values, atol=1e-13)
    back = spectral_propagate(a, -0.7)
    np.testing.assert_allclose(back.values, packet.values, atol=1e-13)


def test_oracle_matches_direct_propagation(packet):
    orc = SpectralOracle(packet)
    np.testing.assert_allclose(orc.field_at(0.5).values, spectral_propagate(packet, 0.5).values, atol=1e-14)


def test_plane_wave_evolves_by_rest_phase():
    p = PhysicalParams(m=1.3, hbar=0.8, c=1.7)
    f = plane_wave_field(4, 5.0, params=p)
    g = spectral_propagate(f, 0.9)
    np.testing.assert_allclose(g.values, plane_wave_solution(4, 5.0, 0.9, p).values, atol=1e-13)


def test_dirac_residual_is_second_order(packet):
    orc = SpectralOracle(packet)
    r = [dirac_residual(orc.field_at(0.2), orc.field_at(0.2 + dt), dt) for dt in (0.02, 0.01)]
    assert np.log2(r[0] / r[1]) == pytest.approx(2.0, abs=0.1)


def test_angular_continuity_residual_is_second_order(packet):
    orc = SpectralOracle(packet)
    r = [max(angular_continuity_residual(orc.field_at(0.2), orc.field_at(0.2 + dt), dt)) for dt in (0.02, 0.01)]
    assert np.log2(r[0] / r[1]) == pytest.approx(2.0, abs=0.2)


def test_constant_potential_solution_satisfies_coupled_equation():
    dts = (0.02, 0.01)
    pot = PotentialField(A0=0.4)
    r = [dirac_residual(plane_wave_solution(4, 5.0, 0.0, A0=0.4), plane_wave_solution(4, 5.0, dt, A0=0.4), dt, pot)
         for dt in dts]
    assert np.log2(r[0] / r[1]) == pytest.approx(2.0, abs=0.1)


def test_zero_potential_takes_free_path_bit_identically(packet):
    orc = SpectralOracle(packet)
    a, b = orc.field_at(0.0), orc.field_at(0.01)
    assert dirac_residual(a, b, 0.01, PotentialField()) == dirac_residual(a, b, 0.01)


def test_spectral_gradient_of_sine():
    n, L = 16, 2 * np.pi
    x = np.arange(n) * L / n
    X = np.meshgrid(x, x, x, indexing="ij")[0]
    g = spectral_gradient(np.sin(X)[..., None], L)
    np.testing.assert_allclose(g[0][..., 0], np.cos(X), atol=1e-12)
    np.testing.assert_allclose(g[1], 0.0, atol=1e-12)


def test_under_resolved_field_is_rejected(rng):
    f = SpinorField(rng.normal(size=(8, 8, 8, 4)) + 0j, 1.0)
    with pytest.raises(ResolutionError):
        SpectralOracle(f)


def test_grid_mismatch_is_rejected(packet):
    other = plane_wave_field(8, 10.0)
    with pytest.raises(GridMismatch):
        dirac_residual(packet, other, 0.1)


def test_field_shape_is_validated():
    with pytest.raises(ValueError):
        SpinorField(np.zeros((4, 4, 3, 4)), 1.0)
