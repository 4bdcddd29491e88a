"""Squared-density flows, current decomposition, polar variables and the quantum potential.

Everything here is a diagnostic evaluated at sample points (x, alpha). A complex
spinor field Psi(x) defines the angular function psi = u(alpha) . Psi(x), whose
real and imaginary parts are the two Majorana components. Spatial derivatives
are spectral, angular derivatives are taken analytically through the basis
functions, and time derivatives are centred on a snapshot pair so that an exact
pair leaves an O(dt^2) residual.

Fluxes are written in division-free form wherever the formula allows it, so
the continuity residuals stay finite at nodes of psi.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import angular as ang
from .errors import NodeCrossing, NodeSingularity
from .params import DEFAULT_PARAMS, PhysicalParams
from .reference import PotentialField, SpinorField, _check_pair, spectral_gradient
from .spinor import ALPHA

# relative amplitude below which a sample counts as a node
EPS_NODE_REL = 1e-3
DUAL_ROUTE_TOL = 1e-8
DECOMPOSITION_TOL = 1e-10
# matrices of n1 m_i on the coefficients: (n1 m_i)(u . c) = u . (K_i c)
K_MATRICES = np.array([ang.operator_matrix(f"n1m{i}") for i in (1, 2, 3)])


@dataclass
class PolarState:
    amplitude: np.ndarray
    phase: np.ndarray  # S, in units of action


@dataclass
class FlowSample:
    v_trans: np.ndarray
    v_ang: np.ndarray
    v_ang_modified: np.ndarray
    Q: np.ndarray
    polar_mismatch: float = 0.0


# ---------------------------------------------------------------------------
# pointwise jets of psi

@dataclass
class _Jet:
    """psi and its derivatives at M samples; D_i is the gauge-covariant gradient."""

    angles: np.ndarray
    psi: np.ndarray      # (M,)
    da: np.ndarray       # (M, 3)      d_s psi
    d2a: np.ndarray      # (M, 3, 3)   d_r d_s psi
    dx: np.ndarray       # (M, 3)      d_i psi
    Dx: np.ndarray       # (M, 3)      d_i psi + i A_i psi / hbar
    daDx: np.ndarray     # (M, 3, 3)   d_s D_i psi, indexed [s, i]
    d2aDx: np.ndarray    # (M, 3, 3, 3) d_r d_s D_i psi, indexed [r, s, i]
    chi: np.ndarray      # (M, 3)      (n1 m_i psi)
    divchi: np.ndarray   # (M,)        sum_i n1 m_i d_i psi
    A: np.ndarray
    dA: np.ndarray
    B1: np.ndarray
    dB1: np.ndarray      # (M, 3, 3): d_r B_1^s indexed [r, s]


def _jet(coef, grad, angles, hbar=1.0, vec_pot=None):
    """Build the jet from coefficients (M, 4) and their spatial gradient (M, 3, 4)."""
    angles = np.asarray(angles, dtype=float)
    coef = np.asarray(coef, dtype=complex)
    grad = np.asarray(grad, dtype=complex)
    alpha, beta, gamma = angles[..., 0], angles[..., 1], angles[..., 2]
    if np.any(np.abs(np.sin(alpha)) < ang.EPS_POLE):
        raise ang.PoleSingularity("sample angle too close to a pole")
    u = ang.basis_u(angles)
    du = ang.basis_du(angles)
    d2u = ang.basis_d2u(angles)
    cov = grad
    if vec_pot is not None:
        a = np.asarray(vec_pot, dtype=float)
        cov = grad + (1j / hbar) * a[:, None] * coef[..., None, :]
    Bm = ang.matrix_B(alpha, gamma)
    dB = ang.matrix_B_derivs(alpha, gamma)
    kc = np.einsum("iab,...b->...ia", K_MATRICES, coef)
    kg = np.einsum("iab,...ib->...a", K_MATRICES, grad)
    return _Jet(
        angles=angles,
        psi=np.einsum("...a,...a->...", u, coef),
        da=np.einsum("...sa,...a->...s", du, coef),
        d2a=np.einsum("...rsa,...a->...rs", d2u, coef),
        dx=np.einsum("...a,...ia->...i", u, grad),
        Dx=np.einsum("...a,...ia->...i", u, cov),
        daDx=np.einsum("...sa,...ia->...si", du, cov),
        d2aDx=np.einsum("...rsa,...ia->...rsi", d2u, cov),
        chi=np.einsum("...a,...ia->...i", u, kc),
        divchi=np.einsum("...a,...a->...", u, kg),
        A=ang.matrix_A(alpha, beta),
        dA=ang.matrix_A_derivs(alpha, beta),
        B1=Bm[..., 0, :],
        dB1=dB[..., :, 0, :],
    )


def _pair(a, b, part):
    """Sum over the selected Majorana parts of a_p b_p ('R', 'I' or 'mean' for both)."""
    if part == "R":
        return a.real * b.real
    if part == "I":
        return a.imag * b.imag
    return (np.conj(a) * b).real


def _angular_flux(j: _Jet, part, params):
    """F^r = psi_p^2 vtilde_p^r (summed over parts for 'mean') and d_r(sin a F^r)."""
    c, om = params.c, params.omega
    psi = j.psi
    # n1 D_i psi and m_i psi, with their angle derivatives
    n1d = -2.0 * np.einsum("...s,...si->...i", j.B1, j.daDx)
    mpsi = -2.0 * np.einsum("...is,...s->...i", j.A, j.da)
    dn1d = -2.0 * (np.einsum("...rs,...si->...ri", j.dB1, j.daDx) + np.einsum("...s,...rsi->...ri", j.B1, j.d2aDx))
    dmpsi = -2.0 * (np.einsum("...ris,...s->...ri", j.dA, j.da) + np.einsum("...is,...rs->...ri", j.A, j.d2a))

    dens = _pair(psi, psi, part)
    t1 = _pair(psi[..., None], n1d, part)           # (M, i)
    t2 = _pair(mpsi, j.Dx, part)                     # (M, i)
    F = 2.0 * c * (np.einsum("...ir,...i->...r", j.A, t1) - j.B1 * np.sum(t2, axis=-1)[..., None])
    F[..., 2] -= om * dens

    # d_r F^r term by term
    div = -om * 2.0 * _pair(psi, j.da[..., 2], part)
    dt1 = _pair(j.da[..., :, None], n1d[..., None, :], part) + _pair(psi[..., None, None], dn1d, part)  # [r, i]
    div = div + 2.0 * c * (np.einsum("...rir,...i->...", j.dA, t1) + np.einsum("...ir,...ri->...", j.A, dt1))
    dt2 = _pair(dmpsi, j.Dx[..., None, :], part) + _pair(mpsi[..., None, :], j.daDx, part)  # [r, i]
    div = div - 2.0 * c * (np.einsum("...rr->...", j.dB1) * np.sum(t2, axis=-1) + np.einsum("...r,...ri->...", j.B1, dt2))
    s, co = np.sin(j.angles[..., 0]), np.cos(j.angles[..., 0])
    return F, co * F[..., 0] + s * div


def _trans_flux_div(j: _Jet, part, params):
    """d_i(psi_p^2 v_p^i) with psi_p^2 v_p^i = -c psi_p (n1 m_i psi)_p."""
    return -params.c * (np.sum(_pair(j.dx, j.chi, part), axis=-1) + _pair(j.psi, j.divchi, part))


# ---------------------------------------------------------------------------
# pointwise velocities

def partial_angular_velocity(phiR, grad_phiR, angles, params: PhysicalParams = DEFAULT_PARAMS):
    """Modified angular velocity of one Majorana component, shape (..., 3)."""
    j = _jet(phiR, grad_phiR, angles, params.hbar)
    psi = j.psi.real
    tol = EPS_NODE_REL * max(1.0, float(np.max(np.abs(phiR))))
    if np.any(np.abs(psi) <= tol * ang.K_NORM):
        raise NodeSingularity("psi_R vanishes at a sample")
    F, _ = _angular_flux(j, "R", params)
    return F / (psi**2)[..., None]


def _polar_velocities(j: _Jet, params):
    """Mean velocities written through |psi| and S; the second route of the dual check."""
    c, hb, om = params.c, params.hbar, params.omega
    psi = j.psi
    rho = np.abs(psi)
    rho2 = rho**2
    da_r = (np.conj(psi)[..., None] * j.da).real / rho[..., None]           # d_s |psi|
    dS = hb * (np.conj(psi)[..., None] * j.da).imag / rho2[..., None]       # d_s S
    dxr = (np.conj(psi)[..., None] * j.dx).real / rho[..., None]            # d_i |psi|
    dxS = hb * (np.conj(psi)[..., None] * j.Dx).imag / rho2[..., None]      # d_i S (+ A_i)
    # d_s d_i |psi|, [s, i]
    cross = (np.conj(j.da)[..., :, None] * j.Dx[..., None, :] + np.conj(psi)[..., None, None] * j.daDx).real
    cross = cross / rho[..., None, None] - (
        (np.conj(psi)[..., None] * j.dx).real[..., None, :] * (np.conj(psi)[..., None] * j.da).real[..., :, None]
    ) / (rho**3)[..., None, None]
    m_rho = -2.0 * np.einsum("...is,...s->...i", j.A, da_r)
    mS = -2.0 * np.einsum("...is,...s->...i", j.A, dS)
    n1S = -2.0 * np.einsum("...s,...s->...", j.B1, dS)
    n1_dxr = -2.0 * np.einsum("...s,...si->...i", j.B1, cross)
    R1 = ang.rotation_first_row(j.angles)
    vt = c * (R1 + np.cross(R1, m_rho) / rho[..., None])
    inner_A = n1_dxr / rho[..., None] - n1S[..., None] * dxS / hb**2
    inner_B = np.sum(m_rho * dxr, axis=-1) / rho2 + np.sum(mS * dxS, axis=-1) / hb**2
    va = 2.0 * c * (np.einsum("...ir,...i->...r", j.A, inner_A) - j.B1 * inner_B[..., None])
    va[..., 2] -= om
    return vt, va


def _quantum_potential(j: _Jet, params):
    c, hb = params.c, params.hbar
    psi = j.psi
    rho = np.abs(psi)
    im_s = (np.conj(psi)[..., None] * j.da).imag                            # Im(psi* d_s psi)
    re_i = (np.conj(psi)[..., None] * j.dx).real                            # Re(psi* d_i psi)
    # T[i, s] = d_i (Im(psi* d_s psi) / |psi|); the potential terms of D cancel here
    num = (np.conj(j.Dx)[..., :, None] * j.da[..., None, :]).imag
    num = num + (np.conj(psi)[..., None, None] * np.swapaxes(j.daDx, -1, -2)).imag
    T = num / rho[..., None, None] - im_s[..., None, :] * re_i[..., :, None] / (rho**3)[..., None, None]
    # d_i(|psi| m_k S) = -2 hbar A_k^s T[i, s]
    G = -2.0 * hb * np.einsum("...ks,...is->...ik", j.A, T)
    R1 = ang.rotation_first_row(j.angles)
    return c * np.einsum("ijk,...j,...ik->...", ang.LEVI_CIVITA, R1, G) / rho


def _require_node_free(j: _Jet, scale):
    if np.any(np.abs(j.psi) <= EPS_NODE_REL * scale):
        raise NodeSingularity("|psi| below the node threshold at a sample")


def mean_velocities(phiR, phiI, gradients, angles, params: PhysicalParams = DEFAULT_PARAMS) -> FlowSample:
    """Density-weighted means of the two partial flows, cross-checked against the polar forms.

    ``gradients`` is the pair (grad_phiR, grad_phiI), each of shape (..., 3, 4).
    """
    coef = np.asarray(phiR, dtype=complex) + 1j * np.asarray(phiI, dtype=complex)
    grad = np.asarray(gradients[0], dtype=complex) + 1j * np.asarray(gradients[1], dtype=complex)
    angles = np.asarray(angles, dtype=float)
    j = _jet(coef, grad, angles, params.hbar)
    _require_node_free(j, ang.K_NORM * max(1e-300, float(np.max(np.abs(coef)))))
    rho2 = np.abs(j.psi) ** 2
    vt = -params.c * (np.conj(j.psi)[..., None] * j.chi).real / rho2[..., None]
    F, _ = _angular_flux(j, "mean", params)
    va = F / rho2[..., None]
    pvt, pva = _polar_velocities(j, params)
    scale = params.c + params.omega
    mismatch = float(max(np.max(np.abs(vt - pvt)), np.max(np.abs(va - pva)))) / scale
    v0 = np.zeros_like(va)
    v0[..., 2] = -params.omega
    return FlowSample(v_trans=vt, v_ang=v0, v_ang_modified=va, Q=_quantum_potential(j, params), polar_mismatch=mismatch)


def quantum_potential(coef, grad, angles, params: PhysicalParams = DEFAULT_PARAMS):
    """Q at samples of a field given by its coefficients (..., 4) and their gradient (..., 3, 4)."""
    j = _jet(coef, grad, angles, params.hbar)
    _require_node_free(j, ang.K_NORM * max(1e-300, float(np.max(np.abs(coef)))))
    return _quantum_potential(j, params)


# ---------------------------------------------------------------------------
# current decomposition

def current_decomposition_check(field: SpinorField, nodes: ang.AngularNodes = ang.AngularNodes(4, 4, 8)):
    """Compare Psi^dag Psi and c Psi^dag alpha Psi with angular quadratures of the partial flows.

    The quadrature integrands are psi_R^2 + psi_I^2 and the division-free partial
    fluxes -c psi_p n1 m_i psi_p; the 4x4x8 product rule integrates both exactly.
    """
    vals = field.values.reshape(-1, 4)
    c = field.params.c
    u = ang.basis_u(nodes.points)                                  # (N, 4)
    uk = np.einsum("na,iab->nib", u, K_MATRICES)                   # (N, i, 4)
    psi = vals @ u.T                                               # (P, N)
    chi = np.einsum("pb,nib->pni", vals, uk)
    dens_q = (np.abs(psi) ** 2) @ nodes.weights
    flux_q = -c * np.einsum("n,pni->pi", nodes.weights, _pair(psi[..., None], chi, "mean"))
    dens_b = np.einsum("pa,pa->p", np.conj(vals), vals).real
    flux_b = c * np.einsum("pa,iab,pb->pi", np.conj(vals), ALPHA, vals).real
    scale = max(1.0, float(np.max(dens_b, initial=0.0)))
    d_err = float(np.max(np.abs(dens_q - dens_b), initial=0.0)) / scale
    f_err = float(np.max(np.abs(flux_q - flux_b), initial=0.0)) / (c * scale)
    return {
        "density_mismatch": d_err,
        "flux_mismatch": f_err,
        "tolerance": DECOMPOSITION_TOL,
        "pass": bool(d_err <= DECOMPOSITION_TOL and f_err <= DECOMPOSITION_TOL),
    }


# ---------------------------------------------------------------------------
# polar variables and phase unwrapping

def polar_decompose(psi, hbar=1.0, eps_node_rel=EPS_NODE_REL) -> PolarState:
    """Amplitude and phase along a path, unwrapped so that S is continuous from the first sample."""
    psi = np.asarray(psi, dtype=complex)
    amp = np.abs(psi)
    scale = float(np.max(amp, initial=0.0))
    bad = np.flatnonzero(amp <= eps_node_rel * scale) if scale > 0 else np.arange(psi.size)
    if bad.size:
        k = int(bad[0])
        raise NodeCrossing(f"path meets a node at sample {k}", segment=(max(k - 1, 0), k))
    return PolarState(amplitude=amp, phase=hbar * np.unwrap(np.angle(psi), axis=0))


def unwrap_grid_phase(psi, hbar=1.0, eps_node_rel=EPS_NODE_REL):
    """Phase of a 3-d sample grid by axis sweeps from the largest-amplitude point.

    Two sweep orders (x, y, z) and (z, y, x) are compared; points where they
    differ by more than pi hbar are flagged. Returns (S, flags) on the input grid.
    """
    psi = np.asarray(psi, dtype=complex)
    amp = np.abs(psi)
    ref = np.unravel_index(int(np.argmax(amp)), psi.shape)
    rolled = np.roll(psi, [-r for r in ref], axis=(0, 1, 2))
    ph = np.angle(rolled)

    def sweep(order):
        out = ph.copy()
        for ax in order:
            out = np.unwrap(out, axis=ax)
        return out

    s1, s2 = sweep((0, 1, 2)), sweep((2, 1, 0))
    # pin both routes to the reference phase before comparing
    s1 = s1 - s1[0, 0, 0] + ph[0, 0, 0]
    s2 = s2 - s2[0, 0, 0] + ph[0, 0, 0]
    flags = (np.abs(s1 - s2) > np.pi) | (np.abs(rolled) <= eps_node_rel * amp.max())
    back = [r for r in ref]
    return hbar * np.roll(s1, back, axis=(0, 1, 2)), np.roll(flags, back, axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# snapshot-pair residuals

@dataclass(frozen=True)
class SampleSet:
    index: np.ndarray   # (M, 3) grid indices
    angles: np.ndarray  # (M, 3)


def node_free_samples(fields, n_points=200, seed=0, margin=0.15, eps_node_rel=EPS_NODE_REL) -> SampleSet:
    """Random grid points and angles where |psi| stays clear of nodes in every given snapshot."""
    rng = np.random.default_rng(seed)
    n = fields[0].n
    idx_all, ang_all = [], []
    got = 0
    for _ in range(50):
        m = 4 * n_points
        idx = rng.integers(0, n, size=(m, 3))
        angles = np.column_stack([
            rng.uniform(margin, np.pi - margin, m), rng.uniform(0, ang.TWO_PI, m), rng.uniform(0, ang.FOUR_PI, m)])
        u = ang.basis_u(angles)
        ok = np.ones(m, dtype=bool)
        for f in fields:
            psi = np.einsum("ma,ma->m", f.values[idx[:, 0], idx[:, 1], idx[:, 2]], u)
            ok &= np.abs(psi) > eps_node_rel * ang.K_NORM * np.sqrt(2.0) * np.max(np.abs(f.values))
        idx_all.append(idx[ok])
        ang_all.append(angles[ok])
        got += int(ok.sum())
        if got >= n_points:
            break
    idx = np.concatenate(idx_all)[:n_points]
    angles = np.concatenate(ang_all)[:n_points]
    if len(idx) == 0:
        raise NodeSingularity("no node-free samples found")
    return SampleSet(idx, angles)


def _sample_data(fld: SpinorField, samples: SampleSet, workers=1):
    grad = spectral_gradient(fld.values, fld.L, workers)  # (3, n, n, n, 4)
    i, j, k = samples.index.T
    coef = fld.values[i, j, k]
    g = np.moveaxis(grad[:, i, j, k], 0, 1)
    return coef, g


def _pot_constants(pot):
    if pot is None:
        return 0.0, None
    A0 = np.asarray(pot.A0, dtype=float)
    A = np.array([np.asarray(a, dtype=float) for a in pot.A], dtype=object)
    if A0.ndim or any(np.asarray(a).ndim for a in A):
        raise ValueError("polar residuals support constant potentials only")
    vec = np.array([float(a) for a in A])
    return float(A0), (vec if np.any(vec != 0) else None)


def squared_density_residual(before: SpinorField, after: SpinorField, dt: float, samples: SampleSet = None,
                             part="R", workers=1):
    """Max over samples of the continuity residual for sin(a) psi_p^2 (p = 'R' or 'I')."""
    _check_pair(before, after)
    if samples is None:
        samples = node_free_samples([before], n_points=200)
    p = before.params
    s = np.sin(samples.angles[:, 0])
    terms, dens = [], []
    for fld in (before, after):
        coef, g = _sample_data(fld, samples, workers)
        j = _jet(coef, g, samples.angles, p.hbar)
        _, divF = _angular_flux(j, part, p)
        terms.append(s * _trans_flux_div(j, part, p) + divF)
        dens.append(_pair(j.psi, j.psi, part))
    res = s * (dens[1] - dens[0]) / dt + 0.5 * (terms[0] + terms[1])
    return float(np.max(np.abs(res)))


HJ_READINGS = ("derived", "typeset")


def _kinetic_angular_velocity(va, reading, params):
    """Angular velocity multiplying d_r S in the Hamilton-Jacobi form.

    The imaginary part of the field equation divided by psi gives exactly
    dS/dt + v^i d_i S - omega d_gamma S + Q = 0: only the drift survives in the
    angular term ('derived'). 'typeset' uses the full mean angular velocity and
    leaves a residual (v^r + omega delta_3^r) d_r S.
    """
    if reading == "typeset":
        return va
    if reading != "derived":
        raise ValueError(f"reading must be one of {HJ_READINGS}")
    out = np.zeros_like(va)
    out[..., 2] = -params.omega
    return out


def hj_and_continuity_residuals(before: SpinorField, after: SpinorField, dt: float, samples: SampleSet = None,
                                pot: PotentialField = None, reading="derived", workers=1):
    """Max residuals (hj, cont) of the Hamilton-Jacobi form and the mean continuity equation.

    Constant potentials enter through S -> S + c A0 t + A.x, i.e. a covariant
    gradient in the angular velocity and c A0 added to dS/dt.
    """
    _check_pair(before, after)
    if samples is None:
        samples = node_free_samples([before, after], n_points=200)
    p = before.params
    A0, vec = _pot_constants(pot)
    s = np.sin(samples.angles[:, 0])
    flux_terms, dens, hj_terms, psis = [], [], [], []
    for fld in (before, after):
        coef, g = _sample_data(fld, samples, workers)
        j = _jet(coef, g, samples.angles, p.hbar, vec_pot=vec)
        _require_node_free(j, ang.K_NORM * float(np.max(np.abs(fld.values))))
        vt, va = _polar_velocities(j, p)
        rho2 = np.abs(j.psi) ** 2
        dxS = p.hbar * (np.conj(j.psi)[:, None] * j.Dx).imag / rho2[:, None]
        daS = p.hbar * (np.conj(j.psi)[:, None] * j.da).imag / rho2[:, None]
        vk = _kinetic_angular_velocity(va, reading, p)
        hj_terms.append(np.sum(vt * dxS, axis=1) + np.sum(vk * daS, axis=1) + _quantum_potential(j, p))
        _, divF = _angular_flux(j, "mean", p)
        flux_terms.append(s * _trans_flux_div(j, "mean", p) + divF)
        dens.append(rho2)
        psis.append(j.psi)
    dS_dt = p.hbar * np.angle(psis[1] * np.conj(psis[0])) / dt + p.c * A0
    hj = dS_dt + 0.5 * (hj_terms[0] + hj_terms[1])
    cont = s * (dens[1] - dens[0]) / dt + 0.5 * (flux_terms[0] + flux_terms[1])
    return float(np.max(np.abs(hj))), float(np.max(np.abs(cont)))


def gauge_shift(fld: SpinorField, f0=0.0, ft=0.0, fx=(0.0, 0.0, 0.0)) -> SpinorField:
    """Multiply by exp(i f / hbar) with f = f0 + ft t + fx . x; fx must keep the field periodic."""
    p = fld.params
    fx = np.asarray(fx, dtype=float)
    dk = 2.0 * np.pi * p.hbar / fld.L
    if np.any(np.abs(fx / dk - np.round(fx / dk)) > 1e-9):
        raise ValueError("spatial gauge gradient must be a multiple of 2 pi hbar / L")
    x = fld.coords()
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    f = f0 + ft * fld.time + fx[0] * X + fx[1] * Y + fx[2] * Z
    out = fld.copy()
    out.values = out.values * np.exp(1j * f / p.hbar)[..., None]
    return out


def gauge_shift_potential(pot: PotentialField, ft=0.0, fx=(0.0, 0.0, 0.0), c=1.0) -> PotentialField:
    """A0 -> A0 - (df/dt)/c, A_i -> A_i - d_i f for a linear gauge function."""
    pot = PotentialField() if pot is None else pot
    return PotentialField(A0=float(pot.A0) - ft / c, A=tuple(float(a) - float(b) for a, b in zip(pot.A, fx)))


# ---------------------------------------------------------------------------
# phase along a path of the mean flow

def path_phase_check(state, x0, angles0, T, n_steps, params: PhysicalParams = DEFAULT_PARAMS, reading="derived"):
    """Follow one path of (v^i, kinetic angular velocity) and compare -dS/dt along it with Q.

    ``state`` must offer evaluate(x, t) -> (Psi, dPsi/dt, grad Psi). Returns the
    max of |dS/dt + Q| over interior steps, the unwrapped phase and the path.
    """
    dt = T / n_steps

    def rates(x, a, t):
        psi, _, grad = state.evaluate(x[None], np.array([t]))
        j = _jet(psi, grad, a[None], params.hbar)
        vt, va = _polar_velocities(j, params)
        va = _kinetic_angular_velocity(va, reading, params)
        return vt[0], va[0], j.psi[0], _quantum_potential(j, params)[0]

    x = np.asarray(x0, dtype=float).copy()
    a = np.asarray(angles0, dtype=float).copy()
    psis, Qs, xs, angs = [], [], [], []
    for n in range(n_steps + 1):
        t = n * dt
        v1, w1, psi, Q = rates(x, a, t)
        psis.append(psi)
        Qs.append(Q)
        xs.append(x.copy())
        angs.append(a.copy())
        if n == n_steps:
            break
        v2, w2, _, _ = rates(x + 0.5 * dt * v1, a + 0.5 * dt * w1, t + 0.5 * dt)
        v3, w3, _, _ = rates(x + 0.5 * dt * v2, a + 0.5 * dt * w2, t + 0.5 * dt)
        v4, w4, _, _ = rates(x + dt * v3, a + dt * w3, t + dt)
        x = x + dt / 6.0 * (v1 + 2 * v2 + 2 * v3 + v4)
        a = a + dt / 6.0 * (w1 + 2 * w2 + 2 * w3 + w4)
    polar = polar_decompose(np.array(psis), params.hbar)
    dS = np.gradient(polar.phase, dt)
    res = np.abs(dS + np.array(Qs))[1:-1]
    return {
        "max_residual": float(np.max(res)),
        "phase": polar.phase,
        "Q": np.array(Qs),
        "positions": np.array(xs),
        "angles": np.array(angs),
    }
