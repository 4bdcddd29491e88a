"""Euler-angle angular-momentum operators on the spin-1/2 subspace.

Functions of the Euler angles (alpha, beta, gamma) are represented through the
four basis functions ``u_a``; operators act on coefficient vectors ``c`` by

    O (c^a u_a) = u_b m^b_a c^a,

so the matrix of a product ``O P`` is ``m_O @ m_P``.

All vectorised routines accept angles as an ``EulerAngles`` instance or as an
array whose last axis holds (alpha, beta, gamma).
"""
from __future__ import annotations

import functools
import time
from dataclasses import dataclass

import numpy as np

from .errors import PoleSingularity
from .params import DEFAULT_PARAMS

EPS_POLE = 1e-9
TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi

# u_a = K * f_a(alpha) * exp(i (s_a beta + t_a gamma))
K_NORM = 1.0 / (2.0 * np.sqrt(2.0) * np.pi)
S_FREQ = np.array([-0.5, 0.5, -0.5, 0.5])
T_FREQ = np.array([-0.5, -0.5, 0.5, 0.5])

LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI_CIVITA[_i, _j, _k] = 1.0
    LEVI_CIVITA[_i, _k, _j] = -1.0


@dataclass(frozen=True)
class EulerAngles:
    """A point on SU(2). beta is reduced mod 2*pi and gamma mod 4*pi."""

    alpha: float
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        a = float(self.alpha)
        if not (0.0 <= a <= np.pi):
            raise ValueError(f"alpha must lie in [0, pi], got {a}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", float(np.mod(self.beta, TWO_PI)))
        object.__setattr__(self, "gamma", float(np.mod(self.gamma, FOUR_PI)))

    def as_array(self):
        return np.array([self.alpha, self.beta, self.gamma])


@dataclass(frozen=True)
class AngularMatrices:
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray


def as_angle_array(angles):
    if isinstance(angles, EulerAngles):
        return angles.as_array()
    arr = np.asarray(angles, dtype=float)
    if arr.shape[-1] != 3:
        raise ValueError("angle arrays need a trailing axis of length 3")
    return arr


def _split(angles):
    arr = as_angle_array(angles)
    return arr[..., 0], arr[..., 1], arr[..., 2]


def _check_pole(alpha):
    if np.any(np.abs(np.sin(alpha)) < EPS_POLE):
        raise PoleSingularity("alpha within eps_pole of 0 or pi; cot/csc undefined")


# ---------------------------------------------------------------------------
# A, B, R and their angle derivatives

def matrix_A(alpha, beta):
    cb, sb = np.cos(beta), np.sin(beta)
    cot, csc = np.cos(alpha) / np.sin(alpha), 1.0 / np.sin(alpha)
    out = np.zeros(np.broadcast(alpha, beta).shape + (3, 3))
    out[..., 0, 0] = -cb
    out[..., 0, 1] = sb * cot
    out[..., 0, 2] = -sb * csc
    out[..., 1, 0] = sb
    out[..., 1, 1] = cb * cot
    out[..., 1, 2] = -cb * csc
    out[..., 2, 1] = -1.0
    return out


def matrix_B(alpha, gamma):
    cg, sg = np.cos(gamma), np.sin(gamma)
    cot, csc = np.cos(alpha) / np.sin(alpha), 1.0 / np.sin(alpha)
    out = np.zeros(np.broadcast(alpha, gamma).shape + (3, 3))
    out[..., 0, 0] = -cg
    out[..., 0, 1] = -sg * csc
    out[..., 0, 2] = sg * cot
    out[..., 1, 0] = -sg
    out[..., 1, 1] = cg * csc
    out[..., 1, 2] = -cg * cot
    out[..., 2, 2] = -1.0
    return out


def matrix_A_derivs(alpha, beta):
    """d A / d angle^r, stacked on axis -3 (r = alpha, beta, gamma)."""
    cb, sb = np.cos(beta), np.sin(beta)
    s, c = np.sin(alpha), np.cos(alpha)
    cot, csc = c / s, 1.0 / s
    out = np.zeros(np.broadcast(alpha, beta).shape + (3, 3, 3))
    out[..., 0, 0, 1] = -sb * csc**2
    out[..., 0, 0, 2] = sb * csc * cot
    out[..., 0, 1, 1] = -cb * csc**2
    out[..., 0, 1, 2] = cb * csc * cot
    out[..., 1, 0, 0] = sb
    out[..., 1, 0, 1] = cb * cot
    out[..., 1, 0, 2] = -cb * csc
    out[..., 1, 1, 0] = cb
    out[..., 1, 1, 1] = -sb * cot
    out[..., 1, 1, 2] = sb * csc
    return out


def matrix_B_derivs(alpha, gamma):
    cg, sg = np.cos(gamma), np.sin(gamma)
    s, c = np.sin(alpha), np.cos(alpha)
    cot, csc = c / s, 1.0 / s
    out = np.zeros(np.broadcast(alpha, gamma).shape + (3, 3, 3))
    out[..., 0, 0, 1] = sg * csc * cot
    out[..., 0, 0, 2] = -sg * csc**2
    out[..., 0, 1, 1] = -cg * csc * cot
    out[..., 0, 1, 2] = cg * csc**2
    out[..., 2, 0, 0] = sg
    out[..., 2, 0, 1] = -cg * csc
    out[..., 2, 0, 2] = cg * cot
    out[..., 2, 1, 0] = -cg
    out[..., 2, 1, 1] = -sg * csc
    out[..., 2, 1, 2] = sg * cot
    return out


def euler_matrices(angles) -> AngularMatrices:
    """A, B and the rotation R = B A^{-1} at the given angles."""
    alpha, beta, gamma = _split(angles)
    _check_pole(alpha)
    A = matrix_A(alpha, beta)
    B = matrix_B(alpha, gamma)
    R = B @ np.linalg.inv(A)
    return AngularMatrices(A=A, B=B, R=R)


def rotation_first_row(angles):
    """First row of R without forming the inverse explicitly."""
    return euler_matrices(angles).R[..., 0, :]


def rotation_derivs(angles):
    """d R / d angle^r stacked on axis -3."""
    alpha, beta, gamma = _split(angles)
    _check_pole(alpha)
    A = matrix_A(alpha, beta)
    B = matrix_B(alpha, gamma)
    Ainv = np.linalg.inv(A)
    dA = matrix_A_derivs(alpha, beta)
    dB = matrix_B_derivs(alpha, gamma)
    BAi = (B @ Ainv)[..., None, :, :]
    Ai = Ainv[..., None, :, :]
    return dB @ Ai - BAi @ dA @ Ai


def divergence_of_rows(angles, which="A"):
    """Analytic d_r(sin(alpha) X_i^r) for X = A or B, shape (..., 3)."""
    alpha, beta, gamma = _split(angles)
    _check_pole(alpha)
    if which == "A":
        X, dX = matrix_A(alpha, beta), matrix_A_derivs(alpha, beta)
    else:
        X, dX = matrix_B(alpha, gamma), matrix_B_derivs(alpha, gamma)
    s = np.sin(alpha)[..., None]
    c = np.cos(alpha)[..., None]
    return c * X[..., :, 0] + s * (dX[..., 0, :, 0] + dX[..., 1, :, 1] + dX[..., 2, :, 2])


# ---------------------------------------------------------------------------
# basis functions

def _phases(beta, gamma):
    return np.exp(1j * (S_FREQ * beta[..., None] + T_FREQ * gamma[..., None]))


def _profiles(alpha):
    ch, sh = np.cos(alpha / 2.0), np.sin(alpha / 2.0)
    f = np.stack([ch + 0j, -1j * sh, -1j * sh, ch + 0j], axis=-1)
    df = np.stack([-0.5 * sh + 0j, -0.5j * ch, -0.5j * ch, -0.5 * sh + 0j], axis=-1)
    return f, df


def basis_u(angles):
    """The four spin-1/2 basis functions at the given angles, shape (..., 4)."""
    alpha, beta, gamma = _split(angles)
    f, _ = _profiles(alpha)
    return K_NORM * f * _phases(beta, gamma)


def basis_du(angles):
    """First derivatives d u_a / d angle^r, shape (..., 3, 4)."""
    alpha, beta, gamma = _split(angles)
    f, df = _profiles(alpha)
    ph = K_NORM * _phases(beta, gamma)
    u = f * ph
    return np.stack([df * ph, 1j * S_FREQ * u, 1j * T_FREQ * u], axis=-2)


def basis_d2u(angles):
    """Second derivatives d^2 u_a / d angle^r d angle^s, shape (..., 3, 3, 4)."""
    alpha, beta, gamma = _split(angles)
    f, df = _profiles(alpha)
    ph = K_NORM * _phases(beta, gamma)
    u = f * ph
    du_a = df * ph
    out = np.empty(u.shape[:-1] + (3, 3, 4), dtype=complex)
    out[..., 0, 0, :] = -0.25 * u
    out[..., 0, 1, :] = out[..., 1, 0, :] = 1j * S_FREQ * du_a
    out[..., 0, 2, :] = out[..., 2, 0, :] = 1j * T_FREQ * du_a
    out[..., 1, 1, :] = -(S_FREQ**2) * u
    out[..., 1, 2, :] = out[..., 2, 1, :] = -(S_FREQ * T_FREQ) * u
    out[..., 2, 2, :] = -(T_FREQ**2) * u
    return out


# ---------------------------------------------------------------------------
# quadrature

@functools.lru_cache(maxsize=32)
def _nodes_cached(n_alpha, n_beta, n_gamma):
    x, wx = np.polynomial.legendre.leggauss(n_alpha)
    alpha = np.arccos(x[::-1])  # increasing alpha
    wa = wx[::-1]
    beta = TWO_PI * np.arange(n_beta) / n_beta
    gamma = FOUR_PI * np.arange(n_gamma) / n_gamma
    A, Bt, G = np.meshgrid(alpha, beta, gamma, indexing="ij")
    W = wa[:, None, None] * (TWO_PI / n_beta) * (FOUR_PI / n_gamma) * np.ones_like(A)
    pts = np.stack([A.ravel(), Bt.ravel(), G.ravel()], axis=-1)
    pts.setflags(write=False)
    w = W.ravel()
    w.setflags(write=False)
    return pts, w, alpha, beta, gamma


@dataclass(frozen=True)
class AngularNodes:
    """Product quadrature: Gauss-Legendre in cos(alpha), trapezoid in beta and gamma.

    ``points`` is flattened in (alpha, beta, gamma) C-order.
    """

    n_alpha: int = 8
    n_beta: int = 8
    n_gamma: int = 16

    @property
    def shape(self):
        return (self.n_alpha, self.n_beta, self.n_gamma)

    @property
    def size(self):
        return self.n_alpha * self.n_beta * self.n_gamma

    @property
    def points(self):
        return _nodes_cached(self.n_alpha, self.n_beta, self.n_gamma)[0]

    @property
    def weights(self):
        return _nodes_cached(self.n_alpha, self.n_beta, self.n_gamma)[1]

    @property
    def alphas(self):
        return _nodes_cached(self.n_alpha, self.n_beta, self.n_gamma)[2]

    @property
    def betas(self):
        return _nodes_cached(self.n_alpha, self.n_beta, self.n_gamma)[3]

    @property
    def gammas(self):
        return _nodes_cached(self.n_alpha, self.n_beta, self.n_gamma)[4]


DEFAULT_NODES = AngularNodes()


def angular_quadrature(integrand, nodes: AngularNodes = DEFAULT_NODES):
    """Integral of ``integrand`` over SU(2) with measure sin(alpha) dalpha dbeta dgamma.

    ``integrand`` receives an (N, 3) array of angles and returns N values; any
    trailing axes in the result are integrated component-wise.
    """
    vals = np.asarray(integrand(nodes.points))
    return np.tensordot(nodes.weights, vals, axes=(0, 0))


# ---------------------------------------------------------------------------
# operators

_FIRST_ORDER = {"M": ("A", "hbar"), "N": ("B", "hbar"), "m": ("A", "two"), "n": ("B", "two")}
OPERATOR_IDS = tuple(
    [f"{p}{i}" for p in "MNmn" for i in (1, 2, 3)] + [f"N1M{i}" for i in (1, 2, 3)] + [f"n1m{i}" for i in (1, 2, 3)]
)


def _parse(op):
    op = str(op)
    if op not in OPERATOR_IDS:
        raise ValueError(f"unknown operator id {op!r}; expected one of {OPERATOR_IDS}")
    if len(op) == 2:
        return [(op[0], int(op[1]) - 1)]
    return [(op[0], int(op[1]) - 1), (op[2], int(op[3]) - 1)]


def _prefactor(letter, hbar):
    return -1j * hbar if letter in "MN" else -2.0 + 0j


def _row(letter, idx, alpha, beta, gamma):
    if letter in "Mm":
        return matrix_A(alpha, beta)[..., idx, :]
    return matrix_B(alpha, gamma)[..., idx, :]


def _row_derivs(letter, idx, alpha, beta, gamma):
    if letter in "Mm":
        return matrix_A_derivs(alpha, beta)[..., :, idx, :]
    return matrix_B_derivs(alpha, gamma)[..., :, idx, :]


def apply_first_order_basis(letter, idx, angles, hbar=1.0):
    """(O u_a)(angles) for a single first-order operator, shape (..., 4)."""
    alpha, beta, gamma = _split(angles)
    row = _row(letter, idx, alpha, beta, gamma)
    du = basis_du(angles)
    return _prefactor(letter, hbar) * np.einsum("...r,...ra->...a", row, du)


def apply_second_order_basis(outer, inner, angles, hbar=1.0):
    """(O P u_a)(angles) where O, P are (letter, index) first-order operators."""
    alpha, beta, gamma = _split(angles)
    orow = _row(outer[0], outer[1], alpha, beta, gamma)
    irow = _row(inner[0], inner[1], alpha, beta, gamma)
    dirow = _row_derivs(inner[0], inner[1], alpha, beta, gamma)
    du = basis_du(angles)
    d2u = basis_d2u(angles)
    term1 = np.einsum("...r,...rs,...sa->...a", orow, dirow, du)
    term2 = np.einsum("...r,...s,...rsa->...a", orow, irow, d2u)
    return _prefactor(outer[0], hbar) * _prefactor(inner[0], hbar) * (term1 + term2)


def apply_operator_basis(op, angles, hbar=1.0):
    """Analytic action of ``op`` on each basis function, shape (..., 4)."""
    parts = _parse(op)
    alpha, _, _ = _split(angles)
    _check_pole(alpha)
    if len(parts) == 1:
        return apply_first_order_basis(parts[0][0], parts[0][1], angles, hbar)
    return apply_second_order_basis(parts[0], parts[1], angles, hbar)


def apply_operator_analytic(op, c, angles, params=DEFAULT_PARAMS):
    """Value of the differential operator applied to c^a u_a at the given angles."""
    vals = apply_operator_basis(op, angles, params.hbar)
    return np.einsum("...a,...a->...", vals, np.asarray(c, dtype=complex))


def _snap(mat, guard=1e-12):
    snapped = np.round(mat.real * 2.0) / 2.0 + 1j * np.round(mat.imag * 2.0) / 2.0
    dist = np.max(np.abs(snapped - mat))
    if dist > guard:
        raise ArithmeticError(f"operator matrix not on the half-integer lattice (distance {dist:.3e})")
    return snapped


@functools.lru_cache(maxsize=None)
def _unit_matrix(letter, idx):
    """Matrix of a first-order operator at hbar = 1, from exact quadrature."""
    nodes = DEFAULT_NODES
    pts = nodes.points
    Ou = apply_first_order_basis(letter, idx, pts, hbar=1.0)
    uc = np.conj(basis_u(pts))
    mat = np.einsum("n,nb,na->ba", nodes.weights, uc, Ou)
    out = _snap(mat)
    out.setflags(write=False)
    return out


def operator_matrix(op, params=DEFAULT_PARAMS):
    """4x4 matrix m with op(c^a u_a) = u_b m^b_a c^a."""
    mats = []
    for letter, idx in _parse(op):
        base = _unit_matrix(letter, idx)
        mats.append(base * params.hbar if letter in "MN" else base.copy())
    out = mats[0]
    for extra in mats[1:]:
        out = out @ extra
    return out


def mm_total_matrix():
    """Matrix of m_i m_i (sum over i) on the spin-1/2 subspace."""
    return sum(operator_matrix(f"m{i}") @ operator_matrix(f"m{i}") for i in (1, 2, 3))


# ---------------------------------------------------------------------------
# identity checks

def _comm(a, b):
    return a @ b - b @ a


def _anti(a, b):
    return a @ b + b @ a


def verify_identities(params=DEFAULT_PARAMS, n_samples=20, seed=12345):
    """Check the algebraic identities of the angular representation.

    Returns a dict mapping identity name to a record with the maximal residual,
    the tolerance used and a pass flag. Matrix identities are exact (tolerance 0).
    """
    from .spinor import GAMMA

    t_start = time.perf_counter()
    hb = params.hbar
    rng = np.random.default_rng(seed)
    M = [operator_matrix(f"M{i}", params) for i in (1, 2, 3)]
    N = [operator_matrix(f"N{i}", params) for i in (1, 2, 3)]
    report = {}

    def record(name, residual, tol):
        report[name] = {"residual": float(residual), "tolerance": float(tol), "passed": bool(residual <= tol)}

    res_m = res_n = res_mn = res_an = res_am = 0.0
    for i in range(3):
        for j in range(3):
            rhs_m = sum(1j * hb * LEVI_CIVITA[i, j, k] * M[k] for k in range(3))
            rhs_n = sum(-1j * hb * LEVI_CIVITA[i, j, k] * N[k] for k in range(3))
            res_m = max(res_m, np.max(np.abs(_comm(M[i], M[j]) - rhs_m)))
            res_n = max(res_n, np.max(np.abs(_comm(N[i], N[j]) - rhs_n)))
            res_mn = max(res_mn, np.max(np.abs(_comm(M[i], N[j]))))
            target = 2.0 * (hb / 2.0) ** 2 * (i == j) * np.eye(4)
            res_an = max(res_an, np.max(np.abs(_anti(N[i], N[j]) - target)))
            res_am = max(res_am, np.max(np.abs(_anti(M[i], M[j]) - target)))
    record("commutator_M", res_m, 0.0)
    record("commutator_N_anomalous", res_n, 0.0)
    record("commutator_MN", res_mn, 0.0)
    record("anticommutator_N", res_an, 0.0)
    record("anticommutator_M", res_am, 0.0)

    g0 = GAMMA[0]
    res_g = np.max(np.abs(operator_matrix("N3", params) - (hb / 2.0) * g0))
    for i in (1, 2, 3):
        res_g = max(res_g, np.max(np.abs(operator_matrix(f"N1M{i}", params) - (hb / 2.0) ** 2 * g0 @ GAMMA[i])))
        res_g = max(res_g, np.max(np.abs(operator_matrix(f"n1m{i}", params) + g0 @ GAMMA[i])))
    record("gamma_recovery", res_g, 0.0)

    nodes = DEFAULT_NODES
    u = basis_u(nodes.points)
    gram = np.einsum("n,na,nb->ab", nodes.weights, np.conj(u), u)
    record("orthonormality", np.max(np.abs(gram - np.eye(4))), 1e-12)

    # sampled interior angles
    ang = np.stack(
        [rng.uniform(0.1, np.pi - 0.1, n_samples), rng.uniform(0, TWO_PI, n_samples), rng.uniform(0, FOUR_PI, n_samples)],
        axis=-1,
    )
    divA = np.max(np.abs(divergence_of_rows(ang, "A")))
    divB = np.max(np.abs(divergence_of_rows(ang, "B")))
    record("divergence_A", divA, 1e-12)
    record("divergence_B", divB, 1e-12)

    # M_i R_1j = i hbar eps_ijk R_1k, with analytic derivatives of R
    mats = euler_matrices(ang)
    dR = rotation_derivs(ang)
    R1 = mats.R[..., 0, :]
    dR1 = dR[..., :, 0, :]  # (n, r, j)
    lhs = -1j * hb * np.einsum("nir,nrj->nij", mats.A, dR1)
    rhs = 1j * hb * np.einsum("ijk,nk->nij", LEVI_CIVITA, R1)
    record("angular_momentum_on_R", np.max(np.abs(lhs - rhs)), 1e-10)

    orth = np.max(np.abs(mats.R @ np.swapaxes(mats.R, -1, -2) - np.eye(3)))
    record("rotation_orthogonal", orth, 1e-12)
    record("rotation_det", np.max(np.abs(np.linalg.det(mats.R) - 1.0)), 1e-12)

    # reduction n1 m_i = -R_1i - eps_ijk R_1j m_k on every basis function
    ub = basis_u(ang)
    m_vals = np.stack([apply_first_order_basis("m", k, ang) for k in range(3)], axis=1)  # (n, k, a)
    res31 = 0.0
    for i in range(3):
        lhs = apply_second_order_basis(("n", 0), ("m", i), ang)
        rhs = -R1[:, i, None] * ub - np.einsum("jk,nj,nka->na", LEVI_CIVITA[i], R1, m_vals)
        res31 = max(res31, np.max(np.abs(lhs - rhs)))
    record("reduction_identity", res31, 1e-10)

    # matrix route vs analytic route on random (op, c, angle)
    res_ma = 0.0
    for _ in range(100):
        op = OPERATOR_IDS[rng.integers(len(OPERATOR_IDS))]
        c = rng.normal(size=4) + 1j * rng.normal(size=4)
        a = np.array([rng.uniform(0.05, np.pi - 0.05), rng.uniform(0, TWO_PI), rng.uniform(0, FOUR_PI)])
        analytic = apply_operator_analytic(op, c, a, params)
        matrix = basis_u(a) @ (operator_matrix(op, params) @ c)
        res_ma = max(res_ma, abs(analytic - matrix) / max(1.0, abs(matrix)))
    record("matrix_vs_analytic", res_ma, 1e-10)

    report["_meta"] = {"runtime_s": time.perf_counter() - t_start}
    return report


def identities_passed(report):
    return all(v["passed"] for k, v in report.items() if not k.startswith("_"))
