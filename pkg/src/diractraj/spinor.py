"""Dirac-representation gamma matrices, Majorana split and bilinear currents."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import MajoranaConstraintViolation

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


def _build_gammas():
    g = np.zeros((4, 4, 4), dtype=complex)
    g[0] = np.diag([1, 1, -1, -1])
    for i in range(3):
        g[i + 1, :2, 2:] = PAULI[i]
        g[i + 1, 2:, :2] = -PAULI[i]
    return g


GAMMA = _build_gammas()
GAMMA.setflags(write=False)
# alpha_i = gamma^0 gamma^i, the velocity matrices
ALPHA = np.array([GAMMA[0] @ GAMMA[i] for i in (1, 2, 3)])
ALPHA.setflags(write=False)
BETA = GAMMA[0]
# charge conjugation: Psi -> C Psi^*
C_MATRIX = 1j * GAMMA[2]


@dataclass(frozen=True)
class CurrentSample:
    density: object
    flux: np.ndarray


def conjugation_map(psi):
    """i gamma^2 Psi^*: the coefficient vector of the complex-conjugate angular function."""
    psi = np.asarray(psi, dtype=complex)
    return np.einsum("ab,...b->...a", C_MATRIX, np.conj(psi))


def majorana_split(psi):
    """Return (Phi_R, Phi_I) with Psi = Phi_R + i Phi_I, both charge-conjugation eigenspinors."""
    psi = np.asarray(psi, dtype=complex)
    cpsi = conjugation_map(psi)
    return 0.5 * (psi + cpsi), (psi - cpsi) / 2j


def majorana_violation(phi):
    """Max deviation of C Phi^* from Phi (Phi_R and Phi_I both satisfy C Phi^* = +Phi)."""
    phi = np.asarray(phi, dtype=complex)
    return float(np.max(np.abs(conjugation_map(phi) - phi), initial=0.0))


def majorana_join(phi_r, phi_i, tol=1e-10):
    """Psi = Phi_R + i Phi_I, warning if either input breaks the Majorana constraint."""
    phi_r = np.asarray(phi_r, dtype=complex)
    phi_i = np.asarray(phi_i, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(phi_r), initial=0.0)), float(np.max(np.abs(phi_i), initial=0.0)))
    bad = max(majorana_violation(phi_r), majorana_violation(phi_i))
    if bad > tol * scale:
        warnings.warn(f"Majorana constraint violated by {bad:.3e}", MajoranaConstraintViolation, stacklevel=2)
    return phi_r + 1j * phi_i


def majorana_params(phi):
    """Pack a Majorana spinor (p, q, -q*, p*) into its four real parameters."""
    phi = np.asarray(phi, dtype=complex)
    return np.stack([phi[..., 0].real, phi[..., 0].imag, phi[..., 1].real, phi[..., 1].imag], axis=-1)


def majorana_from_params(x):
    x = np.asarray(x, dtype=float)
    p = x[..., 0] + 1j * x[..., 1]
    q = x[..., 2] + 1j * x[..., 3]
    return np.stack([p, q, -np.conj(q), np.conj(p)], axis=-1)


def dirac_current(psi, c=1.0):
    """Dirac 4-current: j0 = c Psi^dag Psi, j^i = c Psi^dag gamma^0 gamma^i Psi."""
    psi = np.asarray(psi, dtype=complex)
    dens = c * np.einsum("...a,...a->...", np.conj(psi), psi).real
    flux = c * np.einsum("...a,iab,...b->...i", np.conj(psi), ALPHA, psi).real
    return CurrentSample(density=dens, flux=flux)


def majorana_current(phi, c=1.0):
    """Partial current of a Majorana spinor: (Phi^dag Phi, Phi^dag gamma^0 gamma^i Phi), times c."""
    return dirac_current(phi, c)


def conserved_complex_current(psi):
    """The gauge-dependent complex 4-vector (Psi^T gamma^2 Psi, Psi^T gamma^2 gamma^0 gamma^i Psi)."""
    psi = np.asarray(psi, dtype=complex)
    dens = np.einsum("...a,ab,...b->...", psi, GAMMA[2], psi)
    g2a = np.array([GAMMA[2] @ ALPHA[i] for i in range(3)])
    flux = np.einsum("...a,iab,...b->...i", psi, g2a, psi)
    return dens, flux
