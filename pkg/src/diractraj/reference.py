"""Spectral oracle for the free Dirac equation on a periodic box, plus residual checkers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from . import angular as ang
from .errors import GridMismatch, ResolutionError
from .params import DEFAULT_PARAMS, PhysicalParams
from .spinor import ALPHA, BETA

TAIL_TOL = 1e-8


@dataclass
class SpinorField:
    """Complex 4-spinor sampled at x_j = j L / n on a periodic cube."""

    values: np.ndarray  # (n, n, n, 4) complex128
    L: float
    time: float = 0.0
    params: PhysicalParams = field(default_factory=lambda: DEFAULT_PARAMS)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.complex128)
        v = self.values
        if v.ndim != 4 or v.shape[3] != 4 or not (v.shape[0] == v.shape[1] == v.shape[2]):
            raise ValueError(f"expected (n, n, n, 4) values, got {v.shape}")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def spacing(self):
        return self.L / self.n

    def coords(self):
        return np.arange(self.n) * self.spacing

    def norm(self):
        return float(np.sum(np.abs(self.values) ** 2) * self.spacing**3)

    def copy(self):
        return replace(self, values=self.values.copy())

    def same_grid(self, other):
        return self.n == other.n and np.isclose(self.L, other.L, rtol=0, atol=1e-14 * self.L)


@dataclass
class PotentialField:
    """External potential (c A0, A_i); entries may be scalars or (n, n, n) arrays."""

    A0: object = 0.0
    A: tuple = (0.0, 0.0, 0.0)

    def is_zero(self):
        return np.all(np.asarray(self.A0) == 0) and all(np.all(np.asarray(a) == 0) for a in self.A)


ZERO_POTENTIAL = PotentialField()


def wavenumbers(n, L):
    return 2.0 * np.pi * np.fft.fftfreq(n, d=L / n)


def _kgrid(n, L):
    k = wavenumbers(n, L)
    return np.meshgrid(k, k, k, indexing="ij")


def spectral_tail_mass(values, L, fraction=2.0 / 3.0, workers=1):
    """Fraction of spectral power in modes with any |k_i| above ``fraction`` of Nyquist."""
    n = values.shape[0]
    hat = sfft.fftn(values, axes=(0, 1, 2), workers=workers)
    power = np.sum(np.abs(hat) ** 2, axis=-1)
    k = np.abs(np.fft.fftfreq(n) * n)
    cut = fraction * (n / 2)
    mask1 = k > cut
    mask = mask1[:, None, None] | mask1[None, :, None] | mask1[None, None, :]
    total = power.sum()
    return float(power[mask].sum() / total) if total > 0 else 0.0


def spectral_gradient(values, L, workers=1):
    """d/dx_i of a periodic field by FFT, shape (3,) + values.shape."""
    n = values.shape[0]
    hat = sfft.fftn(values, axes=(0, 1, 2), workers=workers)
    k = wavenumbers(n, L)
    out = np.empty((3,) + values.shape, dtype=complex)
    shapes = [(n, 1, 1), (1, n, 1), (1, 1, n)]
    extra = (1,) * (values.ndim - 3)
    for i in range(3):
        kk = k.reshape(shapes[i] + extra)
        out[i] = sfft.ifftn(1j * kk * hat, axes=(0, 1, 2), workers=workers)
    if np.isrealobj(values):
        out = out.real
    return out


def dirac_hamiltonian_apply(hat, kx, ky, kz, params):
    """H(k) applied to Fourier coefficients hat (..., 4)."""
    c, hb, m = params.c, params.hbar, params.m
    out = c * hb * (
        kx[..., None] * np.einsum("ab,...b->...a", ALPHA[0], hat)
        + ky[..., None] * np.einsum("ab,...b->...a", ALPHA[1], hat)
        + kz[..., None] * np.einsum("ab,...b->...a", ALPHA[2], hat)
    )
    out += m * c**2 * np.einsum("ab,...b->...a", BETA, hat)
    return out


def _apply_propagator(hat, n, L, t, params):
    kx, ky, kz = _kgrid(n, L)
    E = np.sqrt((params.c * params.hbar) ** 2 * (kx**2 + ky**2 + kz**2) + (params.m * params.c**2) ** 2)
    ph = E * t / params.hbar
    Hhat = dirac_hamiltonian_apply(hat, kx, ky, kz, params)
    return np.cos(ph)[..., None] * hat - 1j * (np.sin(ph) / E)[..., None] * Hhat


def spectral_propagate(fld: SpinorField, dt_total: float, workers=1, check_resolution=True) -> SpinorField:
    """Exact free evolution by the closed-form per-mode exponential exp(-i H(k) t / hbar)."""
    if check_resolution:
        tail = spectral_tail_mass(fld.values, fld.L, workers=workers)
        if tail > TAIL_TOL:
            raise ResolutionError(f"spectral tail mass {tail:.3e} exceeds {TAIL_TOL:g}")
    if dt_total == 0.0:
        return replace(fld, values=fld.values.copy())
    hat = sfft.fftn(fld.values, axes=(0, 1, 2), workers=workers)
    hat = _apply_propagator(hat, fld.n, fld.L, dt_total, fld.params)
    vals = sfft.ifftn(hat, axes=(0, 1, 2), workers=workers)
    return replace(fld, values=vals, time=fld.time + dt_total)


class SpectralOracle:
    """Caches the Fourier transform of an initial field so Psi(t) costs one inverse FFT."""

    def __init__(self, initial: SpinorField, workers=1, check_resolution=True):
        if check_resolution:
            tail = spectral_tail_mass(initial.values, initial.L, workers=workers)
            if tail > TAIL_TOL:
                raise ResolutionError(f"spectral tail mass {tail:.3e} exceeds {TAIL_TOL:g}")
        self.initial = initial
        self.workers = workers
        self.hat0 = sfft.fftn(initial.values, axes=(0, 1, 2), workers=workers)

    def hat_at(self, t):
        return _apply_propagator(self.hat0, self.initial.n, self.initial.L, t - self.initial.time, self.initial.params)

    def field_at(self, t) -> SpinorField:
        vals = sfft.ifftn(self.hat_at(t), axes=(0, 1, 2), workers=self.workers)
        return replace(self.initial, values=vals, time=t)


# ---------------------------------------------------------------------------
# initial states

def plane_wave_field(n, L, polarization=(1, 0, 0, 0), params=DEFAULT_PARAMS, time=0.0):
    """Spatially uniform spinor; e_1 is the zero-momentum positive-energy state."""
    pol = np.asarray(polarization, dtype=complex)
    vals = np.broadcast_to(pol, (n, n, n, 4)).copy()
    return SpinorField(vals, L, time, params)


def plane_wave_solution(n, L, t, params=DEFAULT_PARAMS, A0=0.0):
    """e_1 exp(-i (m c^2 + c A0) t / hbar), exact for constant A0 and zero vector potential."""
    ph = np.exp(-1j * (params.m * params.c**2 + params.c * A0) * t / params.hbar)
    return plane_wave_field(n, L, (ph, 0, 0, 0), params, time=t)


def gaussian_packet_values(x, y, z, L, center, width, momentum, polarization, images=2):
    """Periodised Gaussian amplitude exp(-r^2 / 4 w^2) exp(i k.x) times a polarisation vector.

    ``width`` is the rms width of the probability density. The momentum must be a
    multiple of 2 pi / L so the field is exactly periodic.
    """
    pol = np.asarray(polarization, dtype=complex)
    env = np.zeros(np.broadcast(x, y, z).shape)
    shifts = np.arange(-images, images + 1) * L
    for sx in shifts:
        for sy in shifts:
            for sz in shifts:
                r2 = (x - center[0] + sx) ** 2 + (y - center[1] + sy) ** 2 + (z - center[2] + sz) ** 2
                env = env + np.exp(-r2 / (4.0 * width**2))
    phase = np.exp(1j * (momentum[0] * x + momentum[1] * y + momentum[2] * z))
    return (env * phase)[..., None] * pol


def gaussian_packet_field(n=32, L=20.0, width=2.0, center=None, momentum=(0.0, 0.0, 0.0),
                          polarization=(1, 0, 0, 0), params=DEFAULT_PARAMS, normalize=True):
    center = np.full(3, L / 2.0) if center is None else np.asarray(center, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    dk = 2.0 * np.pi / L
    if np.any(np.abs(momentum / dk - np.round(momentum / dk)) > 1e-9):
        raise ValueError("packet momentum must be an integer multiple of 2 pi / L")
    x = np.arange(n) * (L / n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    vals = gaussian_packet_values(X, Y, Z, L, center, width, momentum, polarization)
    fld = SpinorField(vals, L, 0.0, params)
    if normalize:
        fld.values /= np.sqrt(fld.norm())
    return fld


# ---------------------------------------------------------------------------
# residual checkers

def _check_pair(before, after):
    if not before.same_grid(after):
        raise GridMismatch(f"grids differ: n={before.n},L={before.L} vs n={after.n},L={after.L}")


def _pot_arrays(pot, n):
    pot = ZERO_POTENTIAL if pot is None else pot
    A0 = np.asarray(pot.A0, dtype=float)
    A = [np.asarray(a, dtype=float) for a in pot.A]
    return A0, A


def dirac_residual(before: SpinorField, after: SpinorField, dt: float, pot: PotentialField = None, workers=1):
    """Max-norm residual of i hbar dPsi/dt = [c A0 + c alpha.(-i hbar grad + A) + m c^2 beta] Psi.

    The time derivative is centred between the two snapshots and all other terms
    are evaluated on their average, so the residual of an exact pair is O(dt^2).
    """
    _check_pair(before, after)
    p = before.params
    A0, A = _pot_arrays(pot, before.n)
    mid = 0.5 * (before.values + after.values)
    grad = spectral_gradient(mid, before.L, workers)
    lhs = 1j * p.hbar * (after.values - before.values) / dt
    rhs = p.c * A0[..., None] * mid if A0.ndim else p.c * A0 * mid
    for i in range(3):
        Ai = A[i][..., None] if A[i].ndim else A[i]
        kin = -1j * p.hbar * grad[i] + Ai * mid
        rhs = rhs + p.c * np.einsum("ab,...b->...a", ALPHA[i], kin)
    rhs = rhs + p.m * p.c**2 * np.einsum("ab,...b->...a", BETA, mid)
    return float(np.max(np.abs(lhs - rhs)))


RESIDUAL_NODES = ang.AngularNodes(4, 4, 8)


def _node_rows(nodes_pts):
    """Per-node 4-vectors turning coefficient fields into the angular terms of the continuity forms."""
    alpha, beta, gamma = nodes_pts[:, 0], nodes_pts[:, 1], nodes_pts[:, 2]
    sin_a = np.sin(alpha)
    u = ang.basis_u(nodes_pts)
    du = ang.basis_du(nodes_pts)
    d2u = ang.basis_d2u(nodes_pts)
    A = ang.matrix_A(alpha, beta)
    dA = ang.matrix_A_derivs(alpha, beta)
    B = ang.matrix_B(alpha, gamma)
    dB = ang.matrix_B_derivs(alpha, gamma)
    divA = ang.divergence_of_rows(nodes_pts, "A")  # (N, i)
    n1m = np.stack([ang.apply_second_order_basis(("n", 0), ("m", i), nodes_pts) for i in range(3)], axis=1)
    # derivative along r of (m_i u) and (n_1 u)
    d_mu = -2.0 * (np.einsum("nris,nsa->nira", dA, du) + np.einsum("nis,nrsa->nira", A, d2u))  # (N, i, r, a)
    d_n1u = -2.0 * (np.einsum("nrs,nsa->nra", dB[:, :, 0, :], du) + np.einsum("ns,nrsa->nra", B[:, 0, :], d2u))
    mu = -2.0 * np.einsum("nis,nsa->nia", A, du)
    n1u = -2.0 * np.einsum("ns,nsa->na", B[:, 0, :], du)
    # d_r [sin(a) A_i^r g_i] with g_i = (A0/3) m_i psi + A_i n_1 psi
    w_a0 = np.einsum("ni,nia->na", divA, mu) / 3.0 + sin_a[:, None] * np.einsum("nir,nira->na", A, d_mu) / 3.0
    w_ai = divA[:, :, None] * n1u[:, None, :] + sin_a[:, None, None] * np.einsum("nir,nra->nia", A, d_n1u)
    return {
        "sin": sin_a, "u": u, "dgamma_u": du[:, 2, :], "n1m": n1m,
        "w_a0": w_a0, "w_ai": w_ai,
    }


def angular_continuity_residual(before: SpinorField, after: SpinorField, dt: float, pot: PotentialField = None,
                                nodes: ang.AngularNodes = RESIDUAL_NODES, workers=1, return_variants=False):
    """Residuals of the coupled real continuity forms for sin(a) psi_R and sin(a) psi_I.

    The scalar-potential coupling is written in divergence form through
    m_i m_i A0 psi / 3. With ``return_variants`` the residual using A0 psi
    directly is reported as well.
    """
    _check_pair(before, after)
    p = before.params
    c, hb, m = p.c, p.hbar, p.m
    A0, A = _pot_arrays(pot, before.n)
    rows = _node_rows(nodes.points)
    mid = 0.5 * (before.values + after.values)
    dpsi_dt = (after.values - before.values) / dt
    grad = spectral_gradient(mid, before.L, workers)
    res_r = res_i = 0.0
    var_r = var_i = 0.0
    for k in range(nodes.size):
        s = rows["sin"][k]
        dt_term = s * (dpsi_dt @ rows["u"][k])
        flux = sum(grad[i] @ rows["n1m"][k, i] for i in range(3))
        ang_free = m * c * s * (mid @ rows["dgamma_u"][k])
        w0 = mid @ rows["w_a0"][k]
        wi = [mid @ rows["w_ai"][k, i] for i in range(3)]
        couple_i = sum(A[i] * wi[i].imag for i in range(3))
        couple_r = sum(A[i] * wi[i].real for i in range(3))
        t_r = A0 * w0.imag + couple_i
        t_i = -(A0 * w0.real + couple_r)
        rr = dt_term.real - c * s * flux.real - 2.0 * (c / hb) * (t_r + ang_free.real)
        ri = dt_term.imag - c * s * flux.imag - 2.0 * (c / hb) * (t_i + ang_free.imag)
        res_r = max(res_r, float(np.max(np.abs(rr))))
        res_i = max(res_i, float(np.max(np.abs(ri))))
        if return_variants:
            psi_mid = mid @ rows["u"][k]
            vr = dt_term.real - c * s * flux.real - 2.0 * (c / hb) * (couple_i + ang_free.real) - (c / hb) * s * A0 * psi_mid.imag
            vi = dt_term.imag - c * s * flux.imag - 2.0 * (c / hb) * (-couple_r + ang_free.imag) + (c / hb) * s * A0 * psi_mid.real
            var_r = max(var_r, float(np.max(np.abs(vr))))
            var_i = max(var_i, float(np.max(np.abs(vi))))
    if return_variants:
        return (res_r, res_i), (var_r, var_i)
    return res_r, res_i
