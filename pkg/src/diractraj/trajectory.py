"""Material-picture integration of the two Majorana congruences and spinor reconstruction."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from . import angular as ang
from . import kernels
from .errors import (InversionFailure, JacobianCollapse, NodeSingularity, SecantSingularity, StepTooLarge)
from .params import DEFAULT_PARAMS, PhysicalParams
from .reference import SpectralOracle, SpinorField
from .spinor import ALPHA, GAMMA, majorana_params, majorana_split, majorana_from_params

MAX_DT_OMEGA = 0.05
COLLAPSE_J = 1e-6
EPS_NODE_REL = 1e-10

# Majorana spinors (p, q, -q*, p*) spanned by four real parameters
MAJORANA_BASIS = np.array(
    [[1, 0, 0, 1], [1j, 0, 0, -1j], [0, 1, -1, 0], [0, 1j, 1j, 0]], dtype=complex
)

FLAG_NODE = 1
FLAG_COLLAPSE = 2
FLAG_BLOWUP = 3
FLAG_UNRESOLVED = 4
# per-step budget for the estimated drift of psi*J, relative to max |psi_0|
STEP_TOL = 1e-7
# psi_0 at pulled-back points only needs to beat the trilinear map inversion
RECON_INTERP_ORDER = 4
# frozen labels may carry a runaway ln J; capping keeps exp finite
_LNJ_CAP = 700.0


# ---------------------------------------------------------------------------
# closed forms

def angle_flow(theta0, t, params: PhysicalParams = DEFAULT_PARAMS):
    """Rigid drift of the third Euler angle at rate -omega."""
    if isinstance(theta0, ang.EulerAngles):
        return ang.EulerAngles(theta0.alpha, theta0.beta, theta0.gamma - params.omega * t)
    th = np.array(ang.as_angle_array(theta0), dtype=float, copy=True)
    th[..., 2] = np.mod(th[..., 2] - params.omega * t, ang.FOUR_PI)
    return th


def evolution_operator(t, params: PhysicalParams = DEFAULT_PARAMS):
    """U(t) = cos(omega t / 2) I - i gamma^0 sin(omega t / 2)."""
    half = 0.5 * params.omega * t
    return math.cos(half) * np.eye(4, dtype=complex) - 1j * math.sin(half) * GAMMA[0]


def _psi_scale(phi):
    return ang.K_NORM * float(np.linalg.norm(phi))


def velocity(phi, angles, params: PhysicalParams = DEFAULT_PARAMS, eps_node=None):
    """Translational velocity c [u . (alpha_i phi)] / [u . phi] of a Majorana coefficient vector."""
    phi = np.asarray(phi, dtype=complex)
    th = ang.as_angle_array(angles)
    u = ang.basis_u(th)
    dens = u @ phi
    eps = EPS_NODE_REL * _psi_scale(phi) if eps_node is None else eps_node
    if abs(dens) <= eps:
        raise NodeSingularity(f"|psi| = {abs(dens):.3e} at a node")
    num = np.array([u @ (ALPHA[i] @ phi) for i in range(3)])
    return params.c * (num / dens).real


def speed_via_bound_formula(phi, angles, params: PhysicalParams = DEFAULT_PARAMS, eps_node=None):
    """c sqrt(1 + |R_1 x (m psi / psi)|^2), the speed written through the rotation row."""
    phi = np.asarray(phi, dtype=complex)
    th = ang.as_angle_array(angles)
    dens = ang.basis_u(th) @ phi
    eps = EPS_NODE_REL * _psi_scale(phi) if eps_node is None else eps_node
    if abs(dens) <= eps:
        raise NodeSingularity(f"|psi| = {abs(dens):.3e} at a node")
    w = np.array([ang.apply_operator_analytic(f"m{k}", phi, th, params) for k in (1, 2, 3)]) / dens
    r1 = ang.rotation_first_row(th)
    cr = np.cross(r1, w.real)
    return params.c * math.sqrt(1.0 + float(cr @ cr))


def plane_wave_paths(q0, theta0, t, params: PhysicalParams = DEFAULT_PARAMS):
    """Closed-form congruence of the zero-momentum positive-energy plane wave (R branch)."""
    th = ang.as_angle_array(theta0)
    q0 = np.asarray(q0, dtype=float)
    t = np.asarray(t, dtype=float)
    a1, a2, a3 = th[..., 0], th[..., 1], th[..., 2]
    phip = 0.5 * (a3 + a2)
    phim = 0.5 * (a3 - a2)
    cp = np.cos(phip)
    if np.any(np.abs(cp) < 1e-12):
        raise SecantSingularity("cos(phi_plus) = 0: path amplitude diverges")
    r = params.c / params.omega
    sec = 1.0 / cp
    tan_h = np.tan(0.5 * a1)
    wt = params.omega * t
    x = np.sin(phip) - np.sin(phip - wt)
    y = np.cos(phip) - np.cos(phip - wt)
    z = -tan_h * (np.cos(phim) - np.cos(phim - wt))
    return q0 + (r * sec)[..., None] * np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def plane_wave_amplitude(theta0, params: PhysicalParams = DEFAULT_PARAMS):
    """Size scale (c / omega) |sec phi_+| (1 + |tan(alpha / 2)|) of a closed-form path."""
    th = ang.as_angle_array(theta0)
    phip = 0.5 * (th[..., 2] + th[..., 1])
    return (params.c / params.omega) / np.abs(np.cos(phip)) * (1.0 + np.abs(np.tan(0.5 * th[..., 0])))


# ---------------------------------------------------------------------------
# padded-spectrum samplers

def pad_spectrum(hat, pad):
    """Zero-pad Fourier coefficients of an n^3 grid onto (pad n)^3 (values rescaled)."""
    n = hat.shape[0]
    m = n * pad
    idx = (np.round(np.fft.fftfreq(n) * n).astype(int)) % m
    out = np.zeros((m, m, m) + hat.shape[3:], dtype=complex)
    out[np.ix_(idx, idx, idx)] = hat
    return out * pad**3


def branch_params_grid(hat, pad, branch, workers=1):
    """Real Majorana parameters of the R or I part on the padded grid, shape (m, m, m, 4)."""
    vals = sfft.ifftn(pad_spectrum(hat, pad), axes=(0, 1, 2), workers=workers)
    phi_r, phi_i = majorana_split(vals)
    return np.ascontiguousarray(majorana_params(phi_r if branch == "R" else phi_i))


class FieldSampler:
    """Interpolates a periodic 4-parameter Majorana field and its gradient at arbitrary points."""

    def __init__(self, grid, L, order=8):
        self.grid = np.ascontiguousarray(grid)
        self.L = L
        self.order = order

    def __call__(self, pts, active=None, gradient=True):
        pts = np.mod(np.asarray(pts, dtype=float), self.L)
        return kernels.lagrange_interpolate(self.grid, self.L, pts, self.order, active, gradient)


def _contractions(angles):
    """Real coefficient maps from Majorana parameters to u.Phi and u.(alpha_i Phi)."""
    u = ang.basis_u(angles)  # (Na, 4)
    cD = np.einsum("na,ka->nk", u, MAJORANA_BASIS).real
    ab = np.einsum("iab,kb->ika", ALPHA, MAJORANA_BASIS)
    cN = np.einsum("na,ika->nik", u, ab).real
    return cD, cN


# ---------------------------------------------------------------------------
# label grid and bundle

@dataclass
class LabelGrid:
    """Spatial labels on an n^3 lattice times a set of angular quadrature nodes."""

    n: int
    L: float
    nodes: ang.AngularNodes
    initial: SpinorField
    pad: int = 2
    interp_order: int = 8

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two labels per axis")
        if np.any(np.abs(np.sin(self.nodes.alphas)) < ang.EPS_POLE):
            raise ValueError("angle nodes must avoid the alpha poles")
        if not np.isclose(self.initial.L, self.L):
            raise ValueError("initial field box differs from the label box")
        self._hat0 = sfft.fftn(self.initial.values, axes=(0, 1, 2))
        self._samplers = {}

    @property
    def spacing(self):
        return self.L / self.n

    @property
    def n_spatial(self):
        return self.n**3

    def q0(self):
        x = np.arange(self.n) * self.spacing
        X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)

    def theta0(self):
        return np.array(self.nodes.points)

    def sampler(self, branch, order=None):
        if branch not in self._samplers:
            self._samplers[branch] = branch_params_grid(self._hat0, self.pad, branch)
        return FieldSampler(self._samplers[branch], self.L, self.interp_order if order is None else order)

    def initial_coefficients(self, branch):
        """Majorana coefficients Phi_0 at the spatial labels, shape (Ns, 4)."""
        vals, _ = self.sampler(branch)(self.q0())
        return majorana_from_params(vals)

    def initial_density(self, branch):
        """psi_0 at every label and its q0- and theta0-derivatives."""
        vals, grads = self.sampler(branch)(self.q0())
        th = self.theta0()
        cD, _ = _contractions(th)
        du = ang.basis_du(th)  # (Na, 3, 4)
        cT = np.einsum("nra,ka->nrk", du, MAJORANA_BASIS).real
        psi0 = cD @ vals.T  # (Na, Ns)
        gpsi0 = np.einsum("ak,sjk->asj", cD, grads)
        tpsi0 = np.einsum("ark,sk->asr", cT, vals)
        return psi0, np.ascontiguousarray(gpsi0), np.ascontiguousarray(tpsi0)

    def stencils(self):
        nd = self.nodes
        h = self.spacing
        tabs = [
            kernels.nonuniform_stencil(nd.alphas),
            kernels.periodic_stencil(nd.n_beta, ang.TWO_PI / nd.n_beta),
            kernels.periodic_stencil(nd.n_gamma, ang.FOUR_PI / nd.n_gamma),
            kernels.periodic_stencil(self.n, h),
            kernels.periodic_stencil(self.n, h),
            kernels.periodic_stencil(self.n, h),
        ]
        return kernels.stack_stencils(tabs)

    @property
    def dims(self):
        return (self.nodes.n_alpha, self.nodes.n_beta, self.nodes.n_gamma, self.n, self.n, self.n)


@dataclass
class TrajectoryBundle:
    """Recorded congruence: positions, carried densities and Jacobians at the record times."""

    params: PhysicalParams
    L: float
    n: int
    nodes: ang.AngularNodes
    mode: str
    branch: str
    dt: float
    times: np.ndarray            # (R,)
    q: np.ndarray                # (R, Na, Ns, 3)
    psi: np.ndarray              # (R, Na, Ns)
    J: np.ndarray                # (R, Na, Ns)
    flags: np.ndarray            # (Na, Ns) uint8
    psi0: np.ndarray             # (Na, Ns)
    stats: dict = field(default_factory=dict)
    grid: LabelGrid = None

    @property
    def q0(self):
        x = np.arange(self.n) * (self.L / self.n)
        X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)

    @property
    def theta0(self):
        return np.array(self.nodes.points)

    def theta(self, k):
        return angle_flow(self.theta0, self.times[k], self.params)

    def record_index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"no record at t = {t}; recorded times are {self.times.tolist()}")
        return k

    def kept(self):
        return self.flags == 0

    def deformation_blocks(self, k):
        """D_qq = dq/dq0 and D_qtheta = dq/dtheta0 by label differencing at record k."""
        dims = (self.nodes.n_alpha, self.nodes.n_beta, self.nodes.n_gamma, self.n, self.n, self.n)
        stens = _stencils_for(self.nodes, self.n, self.L)
        disp = (self.q[k] - self.q0[None]).reshape(dims + (3,))
        F6 = (self.flags != 0).reshape(dims)
        Dqq = np.empty(dims + (3, 3))
        Dqt = np.empty(dims + (3, 3))
        for j in range(3):
            Dqq[..., :, j] = kernels._deriv_np(disp, F6, 3 + j, stens)[0]
            Dqt[..., :, j] = kernels._deriv_np(disp, F6, j, stens)[0]
        Dqq += np.eye(3)
        Na, Ns = self.flags.shape
        return Dqq.reshape(Na, Ns, 3, 3), Dqt.reshape(Na, Ns, 3, 3)


def _stencils_for(nodes, n, L):
    tabs = [
        kernels.nonuniform_stencil(nodes.alphas),
        kernels.periodic_stencil(nodes.n_beta, ang.TWO_PI / nodes.n_beta),
        kernels.periodic_stencil(nodes.n_gamma, ang.FOUR_PI / nodes.n_gamma),
    ] + [kernels.periodic_stencil(n, L / n)] * 3
    return kernels.stack_stencils(tabs)


# ---------------------------------------------------------------------------
# integration

def _time_grid(dt, T):
    if T == 0:
        return np.array([0.0])
    steps = max(1, int(math.ceil(T / dt - 1e-9)))
    t = np.arange(steps + 1) * dt
    t[-1] = T
    return t


def _record_steps(n_steps, record_every):
    if record_every is None:
        record_every = max(1, int(math.ceil(n_steps / 16)))
    rec = list(range(0, n_steps + 1, record_every))
    if rec[-1] != n_steps:
        rec.append(n_steps)
    return rec


class _OracleStages:
    """Padded Majorana-parameter grids of the oracle field at stage times, cached per time."""

    def __init__(self, oracle: SpectralOracle, branch, pad, order, workers):
        self.oracle = oracle
        self.branch = branch
        self.pad = pad
        self.order = order
        self.workers = workers
        self.cache = {}

    def sampler(self, t):
        key = round(float(t), 15)
        if key not in self.cache:
            if len(self.cache) > 3:
                self.cache.pop(next(iter(self.cache)))
            grid = branch_params_grid(self.oracle.hat_at(t), self.pad, self.branch, self.workers)
            self.cache[key] = FieldSampler(grid, self.oracle.initial.L, self.order)
        return self.cache[key]


def integrate_bundle(grid: LabelGrid, params: PhysicalParams = None, mode="self_contained", dt=None, T=0.0,
                     branch="R", oracle: SpectralOracle = None, record_every=None, workers=1,
                     on_collapse="raise", step_tol=STEP_TOL):
    """Integrate one Majorana congruence with classical RK4 at a fixed step.

    ``self_contained`` mode uses only trajectory-carried data (psi = psi0 / J with
    label-differenced deformation blocks). ``validation`` mode reads the velocity
    from the spectral oracle and carries J through d ln J / dt = div v.
    """
    params = grid.initial.params if params is None else params
    if mode not in ("self_contained", "validation"):
        raise ValueError(f"unknown mode {mode!r}")
    if branch not in ("R", "I"):
        raise ValueError("branch must be 'R' or 'I'")
    if dt is None:
        dt = 0.01 / params.omega
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    if dt > MAX_DT_OMEGA / params.omega * (1 + 1e-12):
        raise StepTooLarge(f"dt = {dt:g} exceeds {MAX_DT_OMEGA}/omega = {MAX_DT_OMEGA / params.omega:g}")
    if mode == "validation" and oracle is None:
        oracle = SpectralOracle(grid.initial, workers=workers)
    if kernels.HAVE_NUMBA:
        import numba

        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))

    t_start = time.perf_counter()
    times = _time_grid(dt, T)
    n_steps = len(times) - 1
    rec_steps = _record_steps(n_steps, record_every)
    q0 = grid.q0()
    th0 = grid.theta0()
    Na, Ns = th0.shape[0], q0.shape[0]
    psi0, gpsi0, tpsi0 = grid.initial_density(branch)
    scale = float(np.max(np.abs(psi0)))
    eps_node = EPS_NODE_REL * scale
    flags = np.where(np.abs(psi0) <= eps_node, FLAG_NODE, 0).astype(np.uint8)
    disp = np.zeros((Na, Ns, 3))
    J = np.ones((Na, Ns))
    lnJ = np.zeros((Na, Ns))
    c = params.c
    min_speed = np.inf
    max_speed = 0.0

    arow = np.ascontiguousarray(ang.matrix_A(th0[:, 0], th0[:, 1]))
    dims = grid.dims
    stens = grid.stencils()

    def r1_at(t):
        return np.ascontiguousarray(ang.rotation_first_row(angle_flow(th0, t, params)))

    Nl = Na * Ns
    psi0_f = np.ascontiguousarray(psi0.ravel())
    gpsi0_f = np.ascontiguousarray(gpsi0.reshape(Nl, 3))
    tpsi0_f = np.ascontiguousarray(tpsi0.reshape(Nl, 3))

    clean = [None]

    def sc_jacobian(d):
        X = np.empty((Nl, 4))
        X[:, :3] = d.reshape(Nl, 3)
        X[:, 3] = J.ravel()
        DQ = kernels.jacobian(X, flags.ravel(), dims, stens, clean[0])
        return X, DQ

    def sc_velocity(d, t):
        X, DQ = sc_jacobian(d)
        Jst = X[:, 3].reshape(Na, Ns)
        kept = flags == 0
        if np.any(Jst[kept] < COLLAPSE_J):
            bad = kept & (Jst < COLLAPSE_J)
            if on_collapse == "raise":
                raise JacobianCollapse(f"J < {COLLAPSE_J:g} on {int(bad.sum())} labels at t = {t:.6g}")
            flags[bad] = FLAG_COLLAPSE
            clean[0] = kernels.clean_mask(flags.ravel(), dims, stens)
        vel, _, newflag = kernels.self_contained_velocity(X, DQ, flags.ravel(), psi0_f, gpsi0_f, tpsi0_f, arow,
                                                         r1_at(t), c, eps_node, dims, stens, clean[0])
        return vel.reshape(Na, Ns, 3), newflag.reshape(Na, Ns), Jst

    if mode == "validation":
        stages = _OracleStages(oracle, branch, grid.pad, grid.interp_order, workers)

    def val_fields(d, t):
        """Interpolated D = u.Phi, N_i = u.alpha_i Phi and div v at the current positions."""
        # spatial-major order keeps successive lookups close together in memory
        active = np.ascontiguousarray(moving().T).ravel()
        pts = np.ascontiguousarray((q0[None] + d).transpose(1, 0, 2)).reshape(-1, 3)
        vals, grads = stages.sampler(t)(pts, active)
        cD, cN = _contractions(angle_flow(th0, t, params))
        vals = vals.reshape(Ns, Na, 4).transpose(1, 0, 2)
        grads = grads.reshape(Ns, Na, 3, 4).transpose(1, 0, 2, 3)
        D = np.einsum("ak,ask->as", cD, vals)
        N = np.einsum("aik,ask->asi", cN, vals)
        dD = np.einsum("ak,asjk->asj", cD, grads)
        divN = np.einsum("aik,asik->as", cN, grads)
        return D, N, dD, divN

    def moving():
        return flags == 0

    def val_velocity(d, t):
        D, N, dD, divN = val_fields(d, t)
        live = moving()
        small = (np.abs(D) <= eps_node) & live
        safe = np.where(~live | small, 1.0, D)
        vel = c * N / safe[..., None]
        div = c * (divN * safe - np.einsum("asi,asi->as", N, dD)) / safe**2
        dead = ~live | small
        vel[dead] = 0.0
        div[dead] = 0.0
        return vel, div, small.astype(np.uint8), np.linalg.norm(dD, axis=-1)

    def speeds(vel):
        nonlocal min_speed, max_speed
        kept = flags == 0
        if np.any(kept):
            sp = np.sqrt(np.einsum("asi,asi->as", vel, vel))[kept] / c
            min_speed = min(min_speed, float(sp.min()))
            max_speed = max(max_speed, float(sp.max()))

    rec_q, rec_psi, rec_J, rec_t = [], [], [], []

    def record(k):
        t = times[k]
        if mode == "self_contained":
            Jr = sc_jacobian(disp)[0][:, 3].reshape(Na, Ns).copy()
            psi = np.where(flags == 0, psi0 / Jr, 0.0)
        else:
            Jr = np.exp(np.minimum(lnJ, _LNJ_CAP))
            if k == 0:
                psi = psi0.copy()
            else:
                D = val_fields(disp, t)[0]
                psi = np.where(moving(), D, 0.0)
        rec_q.append(q0[None] + disp)
        rec_psi.append(psi)
        rec_J.append(Jr)
        rec_t.append(t)

    if mode == "self_contained":
        clean[0] = kernels.clean_mask(flags.ravel(), dims, stens)
    fsal = None
    if 0 in rec_steps:
        record(0)
    for k in range(n_steps):
        t = times[k]
        h = times[k + 1] - t
        if mode == "self_contained":
            k1, f1, _ = sc_velocity(disp, t)
            speeds(k1)
            k2, f2, _ = sc_velocity(disp + 0.5 * h * k1, t + 0.5 * h)
            k3, f3, _ = sc_velocity(disp + 0.5 * h * k2, t + 0.5 * h)
            k4, f4, _ = sc_velocity(disp + h * k3, t + h)
            disp += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            # the endpoint velocity of the previous step is this step's first stage
            if fsal is None:
                k1, g1, f1, _ = val_velocity(disp, t)
            else:
                k1, g1, f1, _ = fsal
                frozen = ~moving()
                k1[frozen] = 0.0
                g1[frozen] = 0.0
            speeds(k1)
            k2, g2, f2, _ = val_velocity(disp + 0.5 * h * k1, t + 0.5 * h)
            k3, g3, f3, _ = val_velocity(disp + 0.5 * h * k2, t + 0.5 * h)
            k4, g4, f4, _ = val_velocity(disp + h * k3, t + h)
            disp += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            lnJ += (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
            fsal = val_velocity(disp, t + h)
            k5, g5, f5, grad5 = fsal
            f1 = f1 | f5
            kept = flags == 0
            if step_tol is not None and scale > 0:
                # k4 is sampled at an O(h^3)-accurate endpoint and k5 at the accepted one; their gap,
                # pushed through psi*J, estimates this step's conservation drift
                err = np.zeros_like(lnJ)
                err[kept] = h * (np.abs(psi0[kept]) * np.abs(g4 - g5)[kept]
                                 + np.exp(np.minimum(lnJ[kept], _LNJ_CAP)) * grad5[kept] * np.linalg.norm(k4 - k5, axis=-1)[kept]) / scale
                flags[kept & ~(err <= step_tol)] = FLAG_UNRESOLVED
            collapsed = moving() & (lnJ < math.log(COLLAPSE_J))
            if np.any(collapsed):
                if on_collapse == "raise":
                    raise JacobianCollapse(f"J < {COLLAPSE_J:g} on {int(collapsed.sum())} labels at t = {t + h:.6g}")
                flags[collapsed] = FLAG_COLLAPSE
            flags[moving() & ~(lnJ < -math.log(COLLAPSE_J))] = FLAG_BLOWUP
        newly = (f1 | f2 | f3 | f4).astype(bool) & moving()
        if np.any(newly):
            flags[newly] = FLAG_NODE
            if mode == "self_contained":
                clean[0] = kernels.clean_mask(flags.ravel(), dims, stens)
        if k + 1 in rec_steps:
            record(k + 1)

    kept = flags == 0
    q_rec = np.stack(rec_q)
    psi_rec = np.stack(rec_psi)
    J_rec = np.stack(rec_J)
    cons = np.abs(psi_rec * J_rec - psi0[None]) / scale if scale > 0 else np.zeros_like(psi_rec)
    cons_kept = cons[:, kept]
    stats = {
        "runtime_s": time.perf_counter() - t_start,
        "n_steps": n_steps,
        "labels": int(Na * Ns),
        "flagged_node": int(np.sum(flags == FLAG_NODE)),
        "flagged_collapse": int(np.sum(flags == FLAG_COLLAPSE)),
        "flagged_blowup": int(np.sum(flags == FLAG_BLOWUP)),
        "flagged_unresolved": int(np.sum(flags == FLAG_UNRESOLVED)),
        "min_speed_over_c": float(min_speed) if np.isfinite(min_speed) else None,
        "max_speed_over_c": float(max_speed),
        "min_J": float(J_rec[:, kept].min()) if kept.any() else None,
        "max_J": float(J_rec[:, kept].max()) if kept.any() else None,
        "conservation_max": float(cons_kept.max()) if cons_kept.size else 0.0,
        "conservation_fraction_1e-6": float(np.mean(np.all(cons_kept <= 1e-6, axis=0))) if cons_kept.size else 1.0,
    }
    return TrajectoryBundle(params=params, L=grid.L, n=grid.n, nodes=grid.nodes, mode=mode, branch=branch, dt=dt,
                            times=np.array(rec_t), q=q_rec, psi=psi_rec, J=J_rec, flags=flags.copy(), psi0=psi0,
                            stats=stats, grid=grid)


# ---------------------------------------------------------------------------
# reconstruction

def _out_points(outgrid, L):
    if isinstance(outgrid, (int, np.integer)):
        x = np.arange(outgrid) * (L / outgrid)
        X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1), (outgrid,) * 3
    pts = np.asarray(outgrid, dtype=float)
    return pts.reshape(-1, 3), pts.shape[:-1]


def reconstruct_majorana(bundle: TrajectoryBundle, t, outgrid=None, strict=False):
    """Majorana coefficients at time t on ``outgrid`` by pulling each angle node back to its labels.

    ``outgrid`` is a number of points per axis (default: the label lattice) or an
    array of points. Returns (Phi of shape outshape + (4,), report).
    """
    k = bundle.record_index(t)
    t = bundle.times[k]
    pts, shape = _out_points(bundle.n if outgrid is None else outgrid, bundle.L)
    M = pts.shape[0]
    nodes = bundle.nodes
    th0 = bundle.theta0
    w = nodes.weights
    uconj = np.conj(ang.basis_u(th0))
    cD, _ = _contractions(th0)
    sampler = bundle.grid.sampler(bundle.branch, RECON_INTERP_ORDER)
    n = bundle.n
    q0 = bundle.q0
    acc = np.zeros((M, 4), dtype=complex)
    used_w = np.zeros(M)
    uncovered = 0
    folded = 0
    total_w = float(np.sum(w))
    for a in range(th0.shape[0]):
        fl = bundle.flags[a]
        if np.all(fl != 0):
            uncovered += M
            continue
        disp = (bundle.q[k, a] - q0).reshape(n, n, n, 3)
        cell_ok = kernels.cells_clear_of((fl != 0).reshape(n, n, n))
        qs, hits = kernels.cell_search_invert(disp, bundle.L, pts, cell_ok)
        use = hits > 0
        uncovered += int(np.sum(~use))
        folded += int(np.sum(hits > 1))
        if not np.any(use):
            continue
        Jq = kernels.trilinear_periodic(bundle.J[k, a].reshape(n, n, n, 1), bundle.L, qs[use])[:, 0]
        vals, _ = sampler(qs[use], gradient=False)
        s = (vals @ cD[a]) / Jq
        acc[use] += (w[a] * s)[:, None] * uconj[a][None, :]
        used_w[use] += w[a]
    if strict and uncovered:
        raise InversionFailure(f"{uncovered} (point, node) pairs lie in no usable deformed cell")
    phi = acc @ evolution_operator(t, bundle.params).T
    report = {
        "t": float(t),
        "uncovered_pairs": uncovered,
        "folded_pairs": folded,
        "coverage": float(np.mean(used_w) / total_w),
        "flagged_labels": int(np.sum(bundle.flags != 0)),
    }
    return phi.reshape(shape + (4,)), report


def reconstruct_dirac(bundle_r: TrajectoryBundle, bundle_i: TrajectoryBundle, t, outgrid=None, strict=False):
    """Psi = Phi_R + i Phi_I assembled from the two independent congruences."""
    if bundle_r.branch != "R" or bundle_i.branch != "I":
        raise ValueError("expected an R-branch and an I-branch bundle")
    phi_r, rep_r = reconstruct_majorana(bundle_r, t, outgrid, strict)
    phi_i, rep_i = reconstruct_majorana(bundle_i, t, outgrid, strict)
    psi = phi_r + 1j * phi_i
    report = {"R": rep_r, "I": rep_i}
    if psi.ndim == 4 and psi.shape[0] == psi.shape[1] == psi.shape[2]:
        return SpinorField(psi, bundle_r.L, float(bundle_r.times[bundle_r.record_index(t)]), bundle_r.params), report
    return psi, report


# ---------------------------------------------------------------------------
# deformation identities

def deformation_identities_check(bundle: TrajectoryBundle, k=-1):
    """Residuals of the cofactor relation, the determinant formula and the Piola identities at record k."""
    Dqq, Dqt = bundle.deformation_blocks(k)
    kept = bundle.flags == 0
    nodes = bundle.nodes
    n = bundle.n
    dims = (nodes.n_alpha, nodes.n_beta, nodes.n_gamma, n, n, n)
    det = np.linalg.det(Dqq)
    eps3 = ang.LEVI_CIVITA
    det_formula = np.einsum("ijk,lmn,...il,...jm,...kn->...", eps3, eps3, Dqq, Dqq, Dqq) / 6.0
    # cofactor J^nu_mu = dJ / d(dq^mu / dq0^nu)
    cof = 0.5 * np.einsum("ijk,lmn,...jm,...kn->...il", eps3, eps3, Dqq, Dqq)
    adj_res = np.einsum("...il,...im->...lm", Dqq, cof) - det[..., None, None] * np.eye(3)
    F6 = (~kept).reshape(dims)
    stens = _stencils_for(nodes, n, bundle.L)
    # spatial Piola: sum_j d/dq0^j cof[i, j] = 0 for each current index i
    cof6 = cof.reshape(dims + (3, 3))
    piola = np.zeros(dims + (3,))
    for j in range(3):
        piola += kernels._deriv_np(cof6[..., :, j], F6, 3 + j, stens)[0]
    # angular Piola for the trivial angle flow: -d_j (J (D^-1 E))^j_r + d_r J = 0
    inv = np.linalg.inv(Dqq)
    G = -(det[..., None, None] * np.einsum("...jl,...lr->...jr", inv, Dqt)).reshape(dims + (3, 3))
    piola_ang = np.zeros(dims + (3,))
    for j in range(3):
        piola_ang += kernels._deriv_np(G[..., j, :], F6, 3 + j, stens)[0]
    det6 = det.reshape(dims + (1,))
    for r in range(3):
        piola_ang[..., r] += kernels._deriv_np(det6, F6, r, stens)[0][..., 0]
    rec_J = bundle.J[k]

    def mx(x):
        x = np.abs(x)
        return float(x.reshape(kept.shape + (-1,))[kept].max()) if kept.any() else 0.0

    return {
        "t": float(bundle.times[k]),
        "adjugate_relation": mx(adj_res),
        "determinant_formula": mx(det_formula - det),
        "piola_spatial": mx(piola.reshape(kept.shape + (3,))),
        "piola_angular": mx(piola_ang.reshape(kept.shape + (3,))),
        "recorded_J_vs_det": mx(rec_J - det),
    }
