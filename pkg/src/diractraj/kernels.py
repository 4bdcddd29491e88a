"""Hot loops of the trajectory engine.

Each kernel has a numba implementation and a vectorised numpy twin with the same
signature; ``DIRACTRAJ_DISABLE_NUMBA=1`` selects the numpy versions. Label arrays
use the layout (angle node, spatial label, ...) with the angle node outermost in
the (alpha, beta, gamma) C-order of the quadrature nodes and spatial labels in
(x, y, z) C-order.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

if HAVE_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range

K_MAX = 4  # taps of the widest derivative stencil


# ---------------------------------------------------------------------------
# finite-difference stencil tables

def periodic_stencil(n, spacing, order=4):
    """Centred first-derivative stencil on a uniform periodic axis.

    Unused taps point at the node itself with zero weight.
    """
    i = np.arange(n)
    idx = np.repeat(i[:, None], K_MAX, axis=1).astype(np.int64)
    w = np.zeros((n, K_MAX))
    if order == 4 and n >= 5:
        offs, coef = (-2, -1, 1, 2), (1 / 12, -2 / 3, 2 / 3, -1 / 12)
    elif n >= 3:
        offs, coef = (-1, 1), (-0.5, 0.5)
    else:
        offs, coef = (), ()
    for k, (o, cf) in enumerate(zip(offs, coef)):
        idx[:, k] = (i + o) % n
        w[:, k] = cf / spacing
    left = np.stack([(i - 1) % n, i], axis=1)
    right = np.stack([i, (i + 1) % n], axis=1)
    wl = np.tile([-1.0 / spacing, 1.0 / spacing], (n, 1))
    return idx, w, left, wl, right, wl.copy()


def nonuniform_stencil(coords):
    """Three-point first-derivative stencil on a non-periodic axis, one-sided at the ends."""
    x = np.asarray(coords, dtype=float)
    n = x.size
    idx = np.repeat(np.arange(n)[:, None], K_MAX, axis=1).astype(np.int64)
    w = np.zeros((n, K_MAX))
    left = np.zeros((n, 2), dtype=np.int64)
    right = np.zeros((n, 2), dtype=np.int64)
    wl = np.zeros((n, 2))
    wr = np.zeros((n, 2))
    if n == 1:
        return idx, w, left, wl, right, wr
    for i in range(n):
        if n == 2:
            pts = [0, 1]
        else:
            pts = [i - 1, i, i + 1] if 0 < i < n - 1 else ([0, 1, 2] if i == 0 else [n - 3, n - 2, n - 1])
        xs = x[pts]
        # derivative of the Lagrange interpolant at x[i]
        for k, p in enumerate(pts):
            others = [xs[m] for m in range(len(pts)) if m != k]
            denom = np.prod([xs[k] - o for o in others])
            num = 0.0
            for a in range(len(others)):
                num += np.prod([x[i] - others[b] for b in range(len(others)) if b != a])
            idx[i, k] = p
            w[i, k] = num / denom
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        left[i] = (lo, i) if lo != i else (i, hi)
        right[i] = (i, hi) if hi != i else (lo, i)
        for tab, wt in ((left, wl), (right, wr)):
            a, b = tab[i]
            wt[i] = (-1.0 / (x[b] - x[a]), 1.0 / (x[b] - x[a]))
    return idx, w, left, wl, right, wr


def stack_stencils(tables):
    """Pack six per-axis tables (alpha, beta, gamma, x, y, z) into padded arrays."""
    nmax = max(t[0].shape[0] for t in tables)
    out = [np.zeros((6, nmax, K_MAX), dtype=np.int64), np.zeros((6, nmax, K_MAX)),
           np.zeros((6, nmax, 2), dtype=np.int64), np.zeros((6, nmax, 2)),
           np.zeros((6, nmax, 2), dtype=np.int64), np.zeros((6, nmax, 2))]
    for ax, t in enumerate(tables):
        n = t[0].shape[0]
        for arr, src in zip(out, t):
            arr[ax, :n] = src
    return tuple(out)


# ---------------------------------------------------------------------------
# self-contained velocity (numba)
#
# Labels are addressed by a flat index l = a * Ns + s; moving along label axis
# ``ax`` from coordinate ``pos`` to ``tgt`` shifts l by (tgt - pos) * stride[ax].
# Flags only change between time steps, so whether a label's stencils touch a
# flagged neighbour is precomputed once per step (bit 0: spatial axes, bit 1:
# angular axes).

def label_strides(dims):
    na, nb, ng, nx, ny, nz = (int(d) for d in dims)
    ns = nx * ny * nz
    return np.array([nb * ng * ns, ng * ns, ns, ny * nz, nz, 1], dtype=np.int64)


@njit(cache=True, parallel=True)
def _clean_mask_nb(flags, dims, stride, sidx, clean):
    na, nb, ng, nx, ny, nz = dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]
    ns = nx * ny * nz
    for a in prange(na * nb * ng):
        cd = np.empty(6, dtype=np.int64)
        cd[0] = a // (nb * ng)
        cd[1] = (a // ng) % nb
        cd[2] = a % ng
        l = a * ns - 1
        for ix in range(nx):
            cd[3] = ix
            for iy in range(ny):
                cd[4] = iy
                for iz in range(nz):
                    cd[5] = iz
                    l += 1
                    bits = 3
                    for ax in range(6):
                        pos = cd[ax]
                        for k in range(K_MAX):
                            if flags[l + (sidx[ax, pos, k] - pos) * stride[ax]] != 0:
                                bits &= 2 if ax >= 3 else 1
                    clean[l] = bits


@njit(cache=True, inline="always")
def _fallback_deriv(X, flags, l, ax, pos, stride, sidx, sw, lidx, lw, ridx, rw, c0, ncomp, out):
    """Central stencil if this axis is clean, else one-sided; False if nothing is usable."""
    st = stride[ax]
    central = True
    for k in range(K_MAX):
        if sw[ax, pos, k] != 0.0 and flags[l + (sidx[ax, pos, k] - pos) * st] != 0:
            central = False
    if central:
        for c in range(ncomp):
            out[c] = 0.0
        for k in range(K_MAX):
            wk = sw[ax, pos, k]
            lk = l + (sidx[ax, pos, k] - pos) * st
            for c in range(ncomp):
                out[c] += wk * X[lk, c0 + c]
        return True
    for side in range(2):
        ti = ridx if side == 0 else lidx
        tw = rw if side == 0 else lw
        if tw[ax, pos, 1] == 0.0:
            continue
        l0 = l + (ti[ax, pos, 0] - pos) * stride[ax]
        l1 = l + (ti[ax, pos, 1] - pos) * stride[ax]
        if flags[l0] == 0 and flags[l1] == 0:
            for c in range(ncomp):
                out[c] = tw[ax, pos, 0] * X[l0, c0 + c] + tw[ax, pos, 1] * X[l1, c0 + c]
            return True
    for c in range(ncomp):
        out[c] = 0.0
    return False


@njit(cache=True, inline="always")
def _axis_deriv(X, flags, clean, l, ax, pos, stride, sidx, sw, lidx, lw, ridx, rw, c0, ncomp, out):
    """d X[:, c0:c0+ncomp] / d(label axis ax) at flat label l."""
    if not clean:
        return _fallback_deriv(X, flags, l, ax, pos, stride, sidx, sw, lidx, lw, ridx, rw, c0, ncomp, out)
    for c in range(ncomp):
        out[c] = 0.0
    st = stride[ax]
    for k in range(K_MAX):
        wk = sw[ax, pos, k]
        lk = l + (sidx[ax, pos, k] - pos) * st
        for c in range(ncomp):
            out[c] += wk * X[lk, c0 + c]
    return True


@njit(cache=True, inline="always")
def _det3(D, l):
    return (D[l, 0, 0] * (D[l, 1, 1] * D[l, 2, 2] - D[l, 1, 2] * D[l, 2, 1])
            - D[l, 0, 1] * (D[l, 1, 0] * D[l, 2, 2] - D[l, 1, 2] * D[l, 2, 0])
            + D[l, 0, 2] * (D[l, 1, 0] * D[l, 2, 1] - D[l, 1, 1] * D[l, 2, 0]))


@njit(cache=True, parallel=True)
def _jacobian_nb(X, DQ, flags, clean, dims, stride, sidx, sw, lidx, lw, ridx, rw):
    """X = [disp, J] per label: fill DQ with I + d disp / d q0 and X[:, 3] with its determinant."""
    na, nb, ng, nx, ny, nz = dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]
    ns = nx * ny * nz
    for a in prange(na * nb * ng):
        cd = np.empty(3, dtype=np.int64)
        d = np.empty(3)
        l = a * ns - 1
        for ix in range(nx):
            cd[0] = ix
            for iy in range(ny):
                cd[1] = iy
                for iz in range(nz):
                    cd[2] = iz
                    l += 1
                    if flags[l] != 0:
                        continue
                    ok = (clean[l] & 1) != 0
                    for j in range(3):
                        _axis_deriv(X, flags, ok, l, 3 + j, cd[j], stride, sidx, sw, lidx, lw, ridx, rw, 0, 3, d)
                        DQ[l, 0, j] = d[0]
                        DQ[l, 1, j] = d[1]
                        DQ[l, 2, j] = d[2]
                        DQ[l, j, j] += 1.0
                    X[l, 3] = _det3(DQ, l)


@njit(cache=True, inline="always")
def _label_velocity(X, DQ, flags, clean, l, a, cd, psi0, gpsi0, tpsi0, arow, r1, c_light,
                    stride, sidx, sw, lidx, lw, ridx, rw, d, E, vel):
    Jl = X[l, 3]
    F = psi0[l] / Jl
    pj = psi0[l] / (Jl * Jl)
    ok_s = (clean[l] & 1) != 0
    ok_a = (clean[l] & 2) != 0
    g0 = g1 = g2 = 0.0
    t0 = t1 = t2 = 0.0
    for j in range(3):
        _axis_deriv(X, flags, ok_s, l, 3 + j, cd[3 + j], stride, sidx, sw, lidx, lw, ridx, rw, 3, 1, d)
        gj = gpsi0[l, j] / Jl - pj * d[0]
        _axis_deriv(X, flags, ok_a, l, j, cd[j], stride, sidx, sw, lidx, lw, ridx, rw, 0, 4, d)
        E[0, j] = d[0]
        E[1, j] = d[1]
        E[2, j] = d[2]
        tj = tpsi0[l, j] / Jl - pj * d[3]
        if j == 0:
            g0, t0 = gj, tj
        elif j == 1:
            g1, t1 = gj, tj
        else:
            g2, t2 = gj, tj
    # y = D^{-T} grad F via the adjugate
    c00 = DQ[l, 1, 1] * DQ[l, 2, 2] - DQ[l, 1, 2] * DQ[l, 2, 1]
    c01 = DQ[l, 1, 2] * DQ[l, 2, 0] - DQ[l, 1, 0] * DQ[l, 2, 2]
    c02 = DQ[l, 1, 0] * DQ[l, 2, 1] - DQ[l, 1, 1] * DQ[l, 2, 0]
    c10 = DQ[l, 0, 2] * DQ[l, 2, 1] - DQ[l, 0, 1] * DQ[l, 2, 2]
    c11 = DQ[l, 0, 0] * DQ[l, 2, 2] - DQ[l, 0, 2] * DQ[l, 2, 0]
    c12 = DQ[l, 0, 1] * DQ[l, 2, 0] - DQ[l, 0, 0] * DQ[l, 2, 1]
    c20 = DQ[l, 0, 1] * DQ[l, 1, 2] - DQ[l, 0, 2] * DQ[l, 1, 1]
    c21 = DQ[l, 0, 2] * DQ[l, 1, 0] - DQ[l, 0, 0] * DQ[l, 1, 2]
    c22 = DQ[l, 0, 0] * DQ[l, 1, 1] - DQ[l, 0, 1] * DQ[l, 1, 0]
    det = DQ[l, 0, 0] * c00 + DQ[l, 0, 1] * c01 + DQ[l, 0, 2] * c02
    y0 = (c00 * g0 + c01 * g1 + c02 * g2) / det
    y1 = (c10 * g0 + c11 * g1 + c12 * g2) / det
    y2 = (c20 * g0 + c21 * g1 + c22 * g2) / det
    dp0 = t0 - (y0 * E[0, 0] + y1 * E[1, 0] + y2 * E[2, 0])
    dp1 = t1 - (y0 * E[0, 1] + y1 * E[1, 1] + y2 * E[2, 1])
    dp2 = t2 - (y0 * E[0, 2] + y1 * E[1, 2] + y2 * E[2, 2])
    s = -2.0 / F
    w0 = s * (arow[a, 0, 0] * dp0 + arow[a, 0, 1] * dp1 + arow[a, 0, 2] * dp2)
    w1 = s * (arow[a, 1, 0] * dp0 + arow[a, 1, 1] * dp1 + arow[a, 1, 2] * dp2)
    w2 = s * (arow[a, 2, 0] * dp0 + arow[a, 2, 1] * dp1 + arow[a, 2, 2] * dp2)
    R0, R1, R2 = r1[a, 0], r1[a, 1], r1[a, 2]
    vel[l, 0] = c_light * (R0 + R1 * w2 - R2 * w1)
    vel[l, 1] = c_light * (R1 + R2 * w0 - R0 * w2)
    vel[l, 2] = c_light * (R2 + R0 * w1 - R1 * w0)


@njit(cache=True, parallel=True)
def _velocity_nb(X, DQ, flags, clean, psi0, gpsi0, tpsi0, arow, r1, c_light, eps_node,
                 dims, stride, sidx, sw, lidx, lw, ridx, rw, vel, fval, newflag):
    na, nb, ng, nx, ny, nz = dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]
    ns = nx * ny * nz
    for a in prange(na * nb * ng):
        cd = np.empty(6, dtype=np.int64)
        cd[0] = a // (nb * ng)
        cd[1] = (a // ng) % nb
        cd[2] = a % ng
        d = np.empty(4)
        E = np.empty((3, 3))
        l = a * ns - 1
        for ix in range(nx):
            cd[3] = ix
            for iy in range(ny):
                cd[4] = iy
                for iz in range(nz):
                    cd[5] = iz
                    l += 1
                    newflag[l] = 0
                    F = 0.0 if flags[l] != 0 else psi0[l] / X[l, 3]
                    fval[l] = F
                    if flags[l] != 0 or abs(F) <= eps_node:
                        newflag[l] = 0 if flags[l] != 0 else 1
                        vel[l, 0] = 0.0
                        vel[l, 1] = 0.0
                        vel[l, 2] = 0.0
                        continue
                    _label_velocity(X, DQ, flags, clean, l, a, cd, psi0, gpsi0, tpsi0, arow, r1, c_light,
                                    stride, sidx, sw, lidx, lw, ridx, rw, d, E, vel)


# ---------------------------------------------------------------------------
# self-contained velocity (numpy)

def _take_axis(X6, idx, ax):
    return np.take(X6, idx, axis=ax)


def _bshape(n, ax, ndim):
    shp = [1] * ndim
    shp[ax] = n
    return shp


def _deriv_np(X6, F6, ax, tabs):
    """Derivative along label axis ``ax`` with one-sided fallback next to flagged labels.

    Returns (derivative, valid mask).
    """
    sidx, sw, lidx, lw, ridx, rw = tabs
    n = X6.shape[ax]
    ndim_f = F6.ndim
    extra = X6.ndim - ndim_f
    wshape = _bshape(n, ax, ndim_f) + [1] * extra
    fshape = _bshape(n, ax, ndim_f)
    main = np.zeros_like(X6)
    bad = np.zeros(F6.shape, dtype=bool)
    for k in range(K_MAX):
        wk = sw[ax, :n, k]
        if not np.any(wk):
            continue
        ik = sidx[ax, :n, k]
        main += wk.reshape(wshape) * _take_axis(X6, ik, ax)
        bad |= (wk != 0).reshape(fshape) & _take_axis(F6, ik, ax)
    out = np.where(bad.reshape(bad.shape + (1,) * extra), 0.0, main)
    valid = ~bad
    for tab_i, tab_w in ((ridx, rw), (lidx, lw)):
        i0, i1 = tab_i[ax, :n, 0], tab_i[ax, :n, 1]
        w0, w1 = tab_w[ax, :n, 0], tab_w[ax, :n, 1]
        usable = (w1 != 0).reshape(fshape) & ~_take_axis(F6, i0, ax) & ~_take_axis(F6, i1, ax)
        alt = w0.reshape(wshape) * _take_axis(X6, i0, ax) + w1.reshape(wshape) * _take_axis(X6, i1, ax)
        use = ~valid & usable
        out = np.where(use.reshape(use.shape + (1,) * extra), alt, out)
        valid |= use
    return out, valid


def _jacobian_np(X, DQ, flags, dims, sidx, sw, lidx, lw, ridx, rw):
    dims = tuple(int(d) for d in dims)
    tabs = (sidx, sw, lidx, lw, ridx, rw)
    X6 = X[:, :3].reshape(dims + (3,))
    F6 = flags.reshape(dims).astype(bool)
    D = np.empty(dims + (3, 3))
    for j in range(3):
        D[..., :, j] = _deriv_np(X6, F6, 3 + j, tabs)[0]
    D += np.eye(3)
    D = D.reshape(-1, 3, 3)
    keep = flags == 0
    DQ[keep] = D[keep]
    X[keep, 3] = np.linalg.det(D[keep])


def _velocity_np(X, DQ, flags, psi0, gpsi0, tpsi0, arow, r1, c_light, eps_node,
                 dims, sidx, sw, lidx, lw, ridx, rw, vel, fval, newflag):
    dims = tuple(int(d) for d in dims)
    tabs = (sidx, sw, lidx, lw, ridx, rw)
    Nl = X.shape[0]
    Na = dims[0] * dims[1] * dims[2]
    X6 = X.reshape(dims + (4,))
    F6 = flags.reshape(dims).astype(bool)
    E = np.empty(dims + (3, 3))
    gJ = np.empty(dims + (3,))
    tJ = np.empty(dims + (3,))
    for j in range(3):
        gJ[..., j] = _deriv_np(X6[..., 3:], F6, 3 + j, tabs)[0][..., 0]
        d = _deriv_np(X6, F6, j, tabs)[0]
        E[..., :, j] = d[..., :3]
        tJ[..., j] = d[..., 3]
    D = np.where((flags == 0)[:, None, None], DQ, np.eye(3))
    E = E.reshape(Nl, 3, 3)
    gJ = gJ.reshape(Nl, 3)
    tJ = tJ.reshape(Nl, 3)
    J = X[:, 3]
    F = psi0 / J
    pj = (psi0 / J**2)[:, None]
    gF = gpsi0 / J[:, None] - pj * gJ
    tF = tpsi0 / J[:, None] - pj * tJ
    y = np.linalg.solve(np.swapaxes(D, -1, -2), gF[..., None])[..., 0]
    dpsi = tF - np.einsum("ni,nir->nr", y, E)
    frozen = flags != 0
    small = (np.abs(F) <= eps_node) & ~frozen
    safeF = np.where(frozen | small, 1.0, F)
    a_of = np.arange(Nl) // (Nl // Na)
    w = -2.0 * np.einsum("nks,ns->nk", arow[a_of], dpsi) / safeF[:, None]
    R = r1[a_of]
    v = c_light * (R + np.cross(R, w))
    dead = (frozen | small)[:, None]
    vel[...] = np.where(dead, 0.0, v)
    fval[...] = np.where(frozen, 0.0, F)
    newflag[...] = small.astype(newflag.dtype)


def clean_mask(flags, dims, stencils):
    """Per-label bits: 1 if no spatial stencil tap is flagged, 2 likewise for the angular taps."""
    dims = np.asarray(dims, dtype=np.int64)
    clean = np.empty(flags.shape[0], dtype=np.uint8)
    if HAVE_NUMBA:
        _clean_mask_nb(flags, dims, label_strides(dims), stencils[0], clean)
        return clean
    sidx = stencils[0]
    F6 = flags.reshape(tuple(int(d) for d in dims)).astype(bool)
    bits = np.full(F6.shape, 3, dtype=np.uint8)
    for ax in range(6):
        n = F6.shape[ax]
        hit = np.zeros(F6.shape, dtype=bool)
        for k in range(K_MAX):
            hit |= np.take(F6, sidx[ax, :n, k], axis=ax)
        bits[hit] &= 2 if ax >= 3 else 1
    clean[:] = bits.ravel()
    return clean


def jacobian(X, flags, dims, stencils, clean=None):
    """X = [disp, J] per flat label. Overwrites X[:, 3] with det D_qq on unflagged labels; returns D_qq."""
    dims = np.asarray(dims, dtype=np.int64)
    DQ = np.empty((X.shape[0], 3, 3))
    if HAVE_NUMBA:
        clean = clean_mask(flags, dims, stencils) if clean is None else clean
        _jacobian_nb(X, DQ, flags, clean, dims, label_strides(dims), *stencils)
    else:
        _jacobian_np(X, DQ, flags, dims, *stencils)
    return DQ


def self_contained_velocity(X, DQ, flags, psi0, gpsi0, tpsi0, arow, r1, c_light, eps_node, dims, stencils,
                            clean=None):
    """Velocity of every label from trajectory-carried data only.

    ``X`` holds [disp, J] per flat label and ``DQ`` the matching D_qq from
    :func:`jacobian`. Returns (vel, F, newflag) where F = psi0 / J is the carried
    density and ``newflag`` marks labels that reached a node at this stage.
    """
    Nl = X.shape[0]
    vel = np.empty((Nl, 3))
    fval = np.empty(Nl)
    newflag = np.zeros(Nl, dtype=np.uint8)
    dims = np.asarray(dims, dtype=np.int64)
    if HAVE_NUMBA:
        clean = clean_mask(flags, dims, stencils) if clean is None else clean
        _velocity_nb(X, DQ, flags, clean, psi0, gpsi0, tpsi0, arow, r1, float(c_light), float(eps_node),
                     dims, label_strides(dims), *stencils, vel, fval, newflag)
    else:
        _velocity_np(X, DQ, flags, psi0, gpsi0, tpsi0, arow, r1, float(c_light), float(eps_node),
                     dims, *stencils, vel, fval, newflag)
    return vel, fval, newflag


# ---------------------------------------------------------------------------
# periodic Lagrange interpolation with gradients

def _lagrange_denoms(K):
    o = np.arange(K, dtype=float)
    return np.array([np.prod([o[k] - o[m] for m in range(K) if m != k]) for k in range(K)])


@njit(cache=True, inline="always")
def _lagrange_weights(t, K, denom, w, dw):
    for k in range(K):
        p = 1.0
        dp = 0.0
        for m in range(K):
            if m == k:
                continue
            # product rule, accumulated incrementally
            dp = dp * (t - m) + p
            p = p * (t - m)
        w[k] = p / denom[k]
        dw[k] = dp / denom[k]


@njit(cache=True, parallel=True, fastmath=True)
def _lagrange_nb(field, h, pts, K, denom, active, val, grad):
    n = field.shape[0]
    P = field.shape[3]
    N = pts.shape[0]
    half = K // 2 - 1
    chunk = 256
    nchunks = (N + chunk - 1) // chunk
    for c in prange(nchunks):
        # scratch is per chunk: allocating per point dominates the runtime
        w = np.empty((3, K))
        dw = np.empty((3, K))
        idx = np.empty((3, K), dtype=np.int64)
        tv = np.empty(P)
        tdy = np.empty(P)
        tdz = np.empty(P)
        rv = np.empty(P)
        rdz = np.empty(P)
        for p in range(c * chunk, min(N, (c + 1) * chunk)):
            if not active[p]:
                continue
            for d in range(3):
                xs = pts[p, d] / h
                fl = math.floor(xs)
                b = np.int64(fl) - half
                _lagrange_weights(xs - fl + half, K, denom, w[d], dw[d])
                for k in range(K):
                    idx[d, k] = (b + k) % n
            for q in range(P):
                val[p, q] = 0.0
                grad[p, 0, q] = 0.0
                grad[p, 1, q] = 0.0
                grad[p, 2, q] = 0.0
            for i in range(K):
                ii = idx[0, i]
                for q in range(P):
                    tv[q] = 0.0
                    tdy[q] = 0.0
                    tdz[q] = 0.0
                for j in range(K):
                    jj = idx[1, j]
                    for q in range(P):
                        rv[q] = 0.0
                        rdz[q] = 0.0
                    if P == 4:
                        r0 = r1 = r2 = r3 = 0.0
                        s0 = s1 = s2 = s3 = 0.0
                        for k in range(K):
                            kk = idx[2, k]
                            a = w[2, k]
                            bb = dw[2, k]
                            f0 = field[ii, jj, kk, 0]
                            f1 = field[ii, jj, kk, 1]
                            f2 = field[ii, jj, kk, 2]
                            f3 = field[ii, jj, kk, 3]
                            r0 += a * f0
                            r1 += a * f1
                            r2 += a * f2
                            r3 += a * f3
                            s0 += bb * f0
                            s1 += bb * f1
                            s2 += bb * f2
                            s3 += bb * f3
                        rv[0], rv[1], rv[2], rv[3] = r0, r1, r2, r3
                        rdz[0], rdz[1], rdz[2], rdz[3] = s0, s1, s2, s3
                    else:
                        for k in range(K):
                            kk = idx[2, k]
                            a = w[2, k]
                            bb = dw[2, k]
                            for q in range(P):
                                f = field[ii, jj, kk, q]
                                rv[q] += a * f
                                rdz[q] += bb * f
                    wyj = w[1, j]
                    dwyj = dw[1, j]
                    for q in range(P):
                        tv[q] += wyj * rv[q]
                        tdy[q] += dwyj * rv[q]
                        tdz[q] += wyj * rdz[q]
                wxi = w[0, i]
                dwxi = dw[0, i] / h
                for q in range(P):
                    val[p, q] += wxi * tv[q]
                    grad[p, 0, q] += dwxi * tv[q]
                    grad[p, 1, q] += wxi * tdy[q] / h
                    grad[p, 2, q] += wxi * tdz[q] / h


@njit(cache=True, parallel=True, fastmath=True)
def _lagrange_val_nb(field, h, pts, K, denom, active, val):
    """Values only; about a quarter of the work of :func:`_lagrange_nb`."""
    n = field.shape[0]
    P = field.shape[3]
    N = pts.shape[0]
    half = K // 2 - 1
    chunk = 256
    nchunks = (N + chunk - 1) // chunk
    for c in prange(nchunks):
        w = np.empty((3, K))
        dw = np.empty((3, K))
        idx = np.empty((3, K), dtype=np.int64)
        tv = np.empty(P)
        for p in range(c * chunk, min(N, (c + 1) * chunk)):
            if not active[p]:
                continue
            for d in range(3):
                xs = pts[p, d] / h
                fl = math.floor(xs)
                b = np.int64(fl) - half
                _lagrange_weights(xs - fl + half, K, denom, w[d], dw[d])
                for k in range(K):
                    idx[d, k] = (b + k) % n
            for q in range(P):
                val[p, q] = 0.0
            for i in range(K):
                ii = idx[0, i]
                for q in range(P):
                    tv[q] = 0.0
                if P == 4:
                    t0 = t1 = t2 = t3 = 0.0
                    for j in range(K):
                        jj = idx[1, j]
                        wyj = w[1, j]
                        for k in range(K):
                            kk = idx[2, k]
                            a = wyj * w[2, k]
                            t0 += a * field[ii, jj, kk, 0]
                            t1 += a * field[ii, jj, kk, 1]
                            t2 += a * field[ii, jj, kk, 2]
                            t3 += a * field[ii, jj, kk, 3]
                    tv[0], tv[1], tv[2], tv[3] = t0, t1, t2, t3
                else:
                    for j in range(K):
                        jj = idx[1, j]
                        wyj = w[1, j]
                        for k in range(K):
                            kk = idx[2, k]
                            a = wyj * w[2, k]
                            for q in range(P):
                                tv[q] += a * field[ii, jj, kk, q]
                wxi = w[0, i]
                for q in range(P):
                    val[p, q] += wxi * tv[q]


def _lagrange_weights_np(t, K, denom):
    """Weights and t-derivatives for an array of local coordinates t, shape (N, K)."""
    diffs = t[:, None] - np.arange(K)[None, :]
    w = np.empty((t.size, K))
    dw = np.zeros((t.size, K))
    for k in range(K):
        others = [m for m in range(K) if m != k]
        w[:, k] = np.prod(diffs[:, others], axis=1) / denom[k]
        for l in others:
            rest = [m for m in others if m != l]
            dw[:, k] += np.prod(diffs[:, rest], axis=1) / denom[k]
    return w, dw


def _lagrange_np(field, h, pts, K, denom, active, val, grad, chunk=4096):
    n = field.shape[0]
    half = K // 2 - 1
    sel = np.nonzero(active)[0]
    off = np.arange(K)
    for start in range(0, sel.size, chunk):
        ids = sel[start:start + chunk]
        xs = pts[ids] / h
        fl = np.floor(xs)
        base = fl.astype(np.int64) - half
        W, DW, IDX = [], [], []
        for d in range(3):
            w, dw = _lagrange_weights_np(xs[:, d] - fl[:, d] + half, K, denom)
            W.append(w)
            DW.append(dw / h)
            IDX.append((base[:, d, None] + off) % n)
        blk = field[IDX[0][:, :, None, None], IDX[1][:, None, :, None], IDX[2][:, None, None, :]]
        val[ids] = np.einsum("ni,nj,nk,nijkq->nq", W[0], W[1], W[2], blk)
        grad[ids, 0] = np.einsum("ni,nj,nk,nijkq->nq", DW[0], W[1], W[2], blk)
        grad[ids, 1] = np.einsum("ni,nj,nk,nijkq->nq", W[0], DW[1], W[2], blk)
        grad[ids, 2] = np.einsum("ni,nj,nk,nijkq->nq", W[0], W[1], DW[2], blk)


def lagrange_interpolate(field, L, pts, order=8, active=None, gradient=True):
    """Periodic tensor-product Lagrange interpolation of ``field`` (n, n, n, P).

    Returns values (N, P) and gradients (N, 3, P) at points (N, 3); inactive
    points are left at zero. With ``gradient=False`` the gradient is None.
    """
    field = np.ascontiguousarray(field, dtype=float)
    pts = np.ascontiguousarray(pts, dtype=float)
    if order % 2 or order < 2:
        raise ValueError("interpolation order must be an even number of points")
    N = pts.shape[0]
    P = field.shape[3]
    h = L / field.shape[0]
    active = np.ones(N, dtype=np.bool_) if active is None else np.ascontiguousarray(active, dtype=np.bool_)
    val = np.zeros((N, P))
    denom = _lagrange_denoms(order)
    if not gradient and HAVE_NUMBA:
        _lagrange_val_nb(field, h, pts, order, denom, active, val)
        return val, None
    grad = np.zeros((N, 3, P))
    fn = _lagrange_nb if HAVE_NUMBA else _lagrange_np
    fn(field, h, pts, order, denom, active, val, grad)
    return val, (grad if gradient else None)


# ---------------------------------------------------------------------------
# periodic trilinear interpolation and map inversion

@njit(cache=True, inline="always")
def _trilinear_point(grid, L, x, y, z, out, jac):
    n0, n1, n2 = grid.shape[0], grid.shape[1], grid.shape[2]
    C = grid.shape[3]
    hx, hy, hz = L / n0, L / n1, L / n2
    sx, sy, sz = x / hx, y / hy, z / hz
    fx, fy, fz = math.floor(sx), math.floor(sy), math.floor(sz)
    tx, ty, tz = sx - fx, sy - fy, sz - fz
    i0 = np.int64(fx) % n0
    j0 = np.int64(fy) % n1
    k0 = np.int64(fz) % n2
    i1, j1, k1 = (i0 + 1) % n0, (j0 + 1) % n1, (k0 + 1) % n2
    for c in range(C):
        c000 = grid[i0, j0, k0, c]
        c100 = grid[i1, j0, k0, c]
        c010 = grid[i0, j1, k0, c]
        c110 = grid[i1, j1, k0, c]
        c001 = grid[i0, j0, k1, c]
        c101 = grid[i1, j0, k1, c]
        c011 = grid[i0, j1, k1, c]
        c111 = grid[i1, j1, k1, c]
        c00 = c000 + tx * (c100 - c000)
        c10 = c010 + tx * (c110 - c010)
        c01 = c001 + tx * (c101 - c001)
        c11 = c011 + tx * (c111 - c011)
        c0 = c00 + ty * (c10 - c00)
        c1 = c01 + ty * (c11 - c01)
        out[c] = c0 + tz * (c1 - c0)
        if jac.shape[0] > 0:
            dx0 = (1 - ty) * (c100 - c000) + ty * (c110 - c010)
            dx1 = (1 - ty) * (c101 - c001) + ty * (c111 - c011)
            jac[c, 0] = ((1 - tz) * dx0 + tz * dx1) / hx
            jac[c, 1] = ((1 - tz) * (c10 - c00) + tz * (c11 - c01)) / hy
            jac[c, 2] = (c1 - c0) / hz


@njit(cache=True, parallel=True)
def _invert_nb(disp_grid, L, targets, tol, maxit, q0, ok):
    M = targets.shape[0]
    for p in prange(M):
        d = np.empty(3)
        jac = np.empty((3, 3))
        x0, x1, x2 = targets[p, 0], targets[p, 1], targets[p, 2]
        g0, g1, g2 = x0, x1, x2
        _trilinear_point(disp_grid, L, g0, g1, g2, d, jac)
        g0, g1, g2 = x0 - d[0], x1 - d[1], x2 - d[2]
        conv = False
        for it in range(maxit):
            _trilinear_point(disp_grid, L, g0, g1, g2, d, jac)
            r0 = g0 + d[0] - x0
            r1 = g1 + d[1] - x1
            r2 = g2 + d[2] - x2
            r0 -= L * math.floor(r0 / L + 0.5)
            r1 -= L * math.floor(r1 / L + 0.5)
            r2 -= L * math.floor(r2 / L + 0.5)
            if max(abs(r0), max(abs(r1), abs(r2))) <= tol:
                conv = True
                break
            a00, a01, a02 = 1 + jac[0, 0], jac[0, 1], jac[0, 2]
            a10, a11, a12 = jac[1, 0], 1 + jac[1, 1], jac[1, 2]
            a20, a21, a22 = jac[2, 0], jac[2, 1], 1 + jac[2, 2]
            det = a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) + a02 * (a10 * a21 - a11 * a20)
            if abs(det) < 1e-14:
                break
            s0 = ((a11 * a22 - a12 * a21) * r0 - (a01 * a22 - a02 * a21) * r1 + (a01 * a12 - a02 * a11) * r2) / det
            s1 = (-(a10 * a22 - a12 * a20) * r0 + (a00 * a22 - a02 * a20) * r1 - (a00 * a12 - a02 * a10) * r2) / det
            s2 = ((a10 * a21 - a11 * a20) * r0 - (a00 * a21 - a01 * a20) * r1 + (a00 * a11 - a01 * a10) * r2) / det
            g0 -= s0
            g1 -= s1
            g2 -= s2
        q0[p, 0] = g0
        q0[p, 1] = g1
        q0[p, 2] = g2
        ok[p] = conv


def _trilinear_np(grid, L, pts, with_jac=False):
    n = np.array(grid.shape[:3])
    h = L / n
    s = pts / h
    f = np.floor(s)
    t = s - f
    i0 = f.astype(np.int64) % n
    i1 = (i0 + 1) % n
    tx, ty, tz = (t[:, k, None] for k in range(3))
    sel = [i0, i1]
    c = {}
    for a in (0, 1):
        for b in (0, 1):
            for cc in (0, 1):
                c[a, b, cc] = grid[sel[a][:, 0], sel[b][:, 1], sel[cc][:, 2]]
    c00 = c[0, 0, 0] + tx * (c[1, 0, 0] - c[0, 0, 0])
    c10 = c[0, 1, 0] + tx * (c[1, 1, 0] - c[0, 1, 0])
    c01 = c[0, 0, 1] + tx * (c[1, 0, 1] - c[0, 0, 1])
    c11 = c[0, 1, 1] + tx * (c[1, 1, 1] - c[0, 1, 1])
    c0 = c00 + ty * (c10 - c00)
    c1 = c01 + ty * (c11 - c01)
    val = c0 + tz * (c1 - c0)
    if not with_jac:
        return val
    dx0 = (1 - ty) * (c[1, 0, 0] - c[0, 0, 0]) + ty * (c[1, 1, 0] - c[0, 1, 0])
    dx1 = (1 - ty) * (c[1, 0, 1] - c[0, 0, 1]) + ty * (c[1, 1, 1] - c[0, 1, 1])
    jac = np.stack([((1 - tz) * dx0 + tz * dx1) / h[0], ((1 - tz) * (c10 - c00) + tz * (c11 - c01)) / h[1],
                    (c1 - c0) / h[2]], axis=-1)
    return val, jac


def _invert_np(disp_grid, L, targets, tol, maxit, q0, ok):
    g = targets - _trilinear_np(disp_grid, L, targets)
    done = np.zeros(targets.shape[0], dtype=bool)
    for _ in range(maxit):
        d, jac = _trilinear_np(disp_grid, L, g, with_jac=True)
        r = g + d - targets
        r -= L * np.floor(r / L + 0.5)
        done |= np.max(np.abs(r), axis=1) <= tol
        if done.all():
            break
        A = jac + np.eye(3)
        det = np.linalg.det(A)
        good = ~done & (np.abs(det) >= 1e-14)
        if not good.any():
            break
        step = np.zeros_like(g)
        step[good] = np.linalg.solve(A[good], r[good][..., None])[..., 0]
        g = g - step
    # final residual check mirrors the compiled loop
    d = _trilinear_np(disp_grid, L, g)
    r = g + d - targets
    r -= L * np.floor(r / L + 0.5)
    q0[...] = g
    ok[...] = np.max(np.abs(r), axis=1) <= tol


def invert_periodic_map(disp_grid, L, targets, tol=1e-12, maxit=50):
    """Solve q0 + disp(q0) = x (mod L) with disp trilinear on a periodic label grid.

    Returns (q0, converged) with q0 not reduced to the box.
    """
    disp_grid = np.ascontiguousarray(disp_grid, dtype=float)
    targets = np.ascontiguousarray(targets, dtype=float)
    M = targets.shape[0]
    q0 = np.empty((M, 3))
    ok = np.zeros(M, dtype=np.bool_)
    fn = _invert_nb if HAVE_NUMBA else _invert_np
    fn(disp_grid, float(L), targets, float(tol) * L, int(maxit), q0, ok)
    return q0, ok


# ---------------------------------------------------------------------------
# deformed-cell search

def _bin_points(pts, L, nbins):
    """Sort points into an nbins^3 periodic binning; returns (order, start) in CSR form."""
    b = np.floor(np.mod(pts, L) / (L / nbins)).astype(np.int64) % nbins
    key = (b[:, 0] * nbins + b[:, 1]) * nbins + b[:, 2]
    order = np.argsort(key, kind="stable")
    start = np.searchsorted(key[order], np.arange(nbins**3 + 1))
    return order.astype(np.int64), start.astype(np.int64)


@njit(cache=True, inline="always")
def _corner(pos, n, i, j, k, di, dj, dk, L, out):
    """Unwrapped physical position of lattice corner (i+di, j+dj, k+dk)."""
    ii, jj, kk = i + di, j + dj, k + dk
    out[0] = pos[ii % n, jj % n, kk % n, 0] + L * (ii // n)
    out[1] = pos[ii % n, jj % n, kk % n, 1] + L * (jj // n)
    out[2] = pos[ii % n, jj % n, kk % n, 2] + L * (kk // n)


@njit(cache=True)
def _cell_search_nb(pos, L, cell_ok, pts, order, start, nbins, tol, maxit, q0, hits):
    n = pos.shape[0]
    hb = L / nbins
    h = L / n
    C = np.empty((8, 3))
    c = np.empty(3)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if not cell_ok[i, j, k]:
                    continue
                for m in range(8):
                    _corner(pos, n, i, j, k, m >> 2, (m >> 1) & 1, m & 1, L, c)
                    C[m, 0] = c[0]
                    C[m, 1] = c[1]
                    C[m, 2] = c[2]
                lo0 = hi0 = C[0, 0]
                lo1 = hi1 = C[0, 1]
                lo2 = hi2 = C[0, 2]
                for m in range(1, 8):
                    lo0 = min(lo0, C[m, 0])
                    hi0 = max(hi0, C[m, 0])
                    lo1 = min(lo1, C[m, 1])
                    hi1 = max(hi1, C[m, 1])
                    lo2 = min(lo2, C[m, 2])
                    hi2 = max(hi2, C[m, 2])
                for bx in range(int(math.floor(lo0 / hb)), int(math.floor(hi0 / hb)) + 1):
                    for by in range(int(math.floor(lo1 / hb)), int(math.floor(hi1 / hb)) + 1):
                        for bz in range(int(math.floor(lo2 / hb)), int(math.floor(hi2 / hb)) + 1):
                            key = ((bx % nbins) * nbins + by % nbins) * nbins + bz % nbins
                            for r in range(start[key], start[key + 1]):
                                p = order[r]
                                # shift the target into this cell's unwrapped frame
                                x0 = pts[p, 0] - L * math.floor(pts[p, 0] / L) + L * math.floor(bx / nbins)
                                x1 = pts[p, 1] - L * math.floor(pts[p, 1] / L) + L * math.floor(by / nbins)
                                x2 = pts[p, 2] - L * math.floor(pts[p, 2] / L) + L * math.floor(bz / nbins)
                                if x0 < lo0 or x0 > hi0 or x1 < lo1 or x1 > hi1 or x2 < lo2 or x2 > hi2:
                                    continue
                                s0 = s1 = s2 = 0.5
                                conv = False
                                for it in range(maxit):
                                    a0 = 1 - s0
                                    a1 = 1 - s1
                                    a2 = 1 - s2
                                    w000 = a0 * a1 * a2
                                    w001 = a0 * a1 * s2
                                    w010 = a0 * s1 * a2
                                    w011 = a0 * s1 * s2
                                    w100 = s0 * a1 * a2
                                    w101 = s0 * a1 * s2
                                    w110 = s0 * s1 * a2
                                    w111 = s0 * s1 * s2
                                    r0 = (w000 * C[0, 0] + w001 * C[1, 0] + w010 * C[2, 0] + w011 * C[3, 0]
                                          + w100 * C[4, 0] + w101 * C[5, 0] + w110 * C[6, 0] + w111 * C[7, 0]) - x0
                                    r1 = (w000 * C[0, 1] + w001 * C[1, 1] + w010 * C[2, 1] + w011 * C[3, 1]
                                          + w100 * C[4, 1] + w101 * C[5, 1] + w110 * C[6, 1] + w111 * C[7, 1]) - x1
                                    r2 = (w000 * C[0, 2] + w001 * C[1, 2] + w010 * C[2, 2] + w011 * C[3, 2]
                                          + w100 * C[4, 2] + w101 * C[5, 2] + w110 * C[6, 2] + w111 * C[7, 2]) - x2
                                    if max(abs(r0), max(abs(r1), abs(r2))) <= tol:
                                        conv = True
                                        break
                                    # columns: d X / d s0, d s1, d s2
                                    m00 = m01 = m02 = m10 = m11 = m12 = m20 = m21 = m22 = 0.0
                                    for m in range(8):
                                        e0 = m >> 2
                                        e1 = (m >> 1) & 1
                                        e2 = m & 1
                                        f0 = s0 if e0 else a0
                                        f1 = s1 if e1 else a1
                                        f2 = s2 if e2 else a2
                                        g0 = (1.0 if e0 else -1.0) * f1 * f2
                                        g1 = (1.0 if e1 else -1.0) * f0 * f2
                                        g2 = (1.0 if e2 else -1.0) * f0 * f1
                                        m00 += g0 * C[m, 0]
                                        m01 += g1 * C[m, 0]
                                        m02 += g2 * C[m, 0]
                                        m10 += g0 * C[m, 1]
                                        m11 += g1 * C[m, 1]
                                        m12 += g2 * C[m, 1]
                                        m20 += g0 * C[m, 2]
                                        m21 += g1 * C[m, 2]
                                        m22 += g2 * C[m, 2]
                                    det = (m00 * (m11 * m22 - m12 * m21) - m01 * (m10 * m22 - m12 * m20)
                                           + m02 * (m10 * m21 - m11 * m20))
                                    if abs(det) < 1e-300:
                                        break
                                    d0 = ((m11 * m22 - m12 * m21) * r0 - (m01 * m22 - m02 * m21) * r1
                                          + (m01 * m12 - m02 * m11) * r2) / det
                                    d1 = (-(m10 * m22 - m12 * m20) * r0 + (m00 * m22 - m02 * m20) * r1
                                          - (m00 * m12 - m02 * m10) * r2) / det
                                    d2 = ((m10 * m21 - m11 * m20) * r0 - (m00 * m21 - m01 * m20) * r1
                                          + (m00 * m11 - m01 * m10) * r2) / det
                                    s0 -= d0
                                    s1 -= d1
                                    s2 -= d2
                                    if abs(s0 - 0.5) > 2.0 or abs(s1 - 0.5) > 2.0 or abs(s2 - 0.5) > 2.0:
                                        break
                                eps = 1e-9
                                if conv and -eps <= s0 <= 1 + eps and -eps <= s1 <= 1 + eps and -eps <= s2 <= 1 + eps:
                                    if hits[p] == 0:
                                        q0[p, 0] = (i + s0) * h
                                        q0[p, 1] = (j + s1) * h
                                        q0[p, 2] = (k + s2) * h
                                    hits[p] += 1


def _cell_search_np(pos, L, cell_ok, pts, tol, maxit, q0, hits):
    n = pos.shape[0]
    h = L / n
    I, J_, K_ = np.nonzero(cell_ok)
    if I.size == 0:
        return
    corners = np.empty((I.size, 8, 3))
    for m in range(8):
        di, dj, dk = m >> 2, (m >> 1) & 1, m & 1
        ii, jj, kk = I + di, J_ + dj, K_ + dk
        corners[:, m] = pos[ii % n, jj % n, kk % n] + L * np.stack([ii // n, jj // n, kk // n], axis=-1)
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    # candidate (cell, point) pairs through the same periodic binning as the compiled loop
    M = pts.shape[0]
    nbins = max(1, int(round(M ** (1.0 / 3.0))))
    hb = L / nbins
    order, start = _bin_points(pts, L, nbins)
    wrapped = np.mod(pts, L)
    blo = np.floor(lo / hb).astype(np.int64)
    cnt = np.floor(hi / hb).astype(np.int64) - blo + 1
    tot = cnt.prod(axis=1)
    cell_of = np.repeat(np.arange(I.size), tot)
    within = np.arange(cell_of.size) - np.repeat(np.cumsum(tot) - tot, tot)
    c = cnt[cell_of]
    off = np.stack([within // (c[:, 1] * c[:, 2]), (within // c[:, 2]) % c[:, 1], within % c[:, 2]], axis=-1)
    b = blo[cell_of] + off
    key = ((b[:, 0] % nbins) * nbins + b[:, 1] % nbins) * nbins + b[:, 2] % nbins
    per = start[key + 1] - start[key]
    cells = np.repeat(cell_of, per)
    first_r = np.repeat(start[key], per)
    r = first_r + np.arange(cells.size) - np.repeat(np.cumsum(per) - per, per)
    cand = order[r]
    X = wrapped[cand] + L * np.floor(np.repeat(b, per, axis=0) / nbins)
    inbox = np.all((X >= lo[cells]) & (X <= hi[cells]), axis=1)
    cells, cand, X = cells[inbox], cand[inbox], X[inbox]
    C = corners[cells]
    s = np.full((cells.size, 3), 0.5)
    conv = np.zeros(cells.size, dtype=bool)
    alive = np.ones(cells.size, dtype=bool)
    bits = np.array([[m >> 2, (m >> 1) & 1, m & 1] for m in range(8)], dtype=float)
    for _ in range(maxit):
        f = np.where(bits[None] == 1, s[:, None, :], 1 - s[:, None, :])  # (P, 8, 3)
        w = f.prod(axis=-1)
        r = np.einsum("pm,pmc->pc", w, C) - X
        conv |= alive & (np.max(np.abs(r), axis=1) <= tol)
        alive &= ~conv
        if not alive.any():
            break
        sign = np.where(bits == 1, 1.0, -1.0)
        g = np.stack([sign[None, :, d] * np.prod(np.delete(f, d, axis=2), axis=-1) for d in range(3)], axis=-1)
        M = np.einsum("pmd,pmc->pcd", g, C)
        det = np.linalg.det(M)
        ok = alive & (np.abs(det) >= 1e-300)
        step = np.zeros_like(s)
        step[ok] = np.linalg.solve(M[ok], r[ok][..., None])[..., 0]
        s = s - step
        alive &= ok & np.all(np.abs(s - 0.5) <= 2.0, axis=1)
    eps = 1e-9
    good = conv & np.all((s >= -eps) & (s <= 1 + eps), axis=1)
    cells, cand, s = cells[good], cand[good], s[good]
    # first hit in lattice order, like the compiled loop
    rank = np.lexsort((cells, cand))
    cells, cand, s = cells[rank], cand[rank], s[rank]
    np.add.at(hits, cand, 1)
    first = np.ones(cand.size, dtype=bool)
    first[1:] = cand[1:] != cand[:-1]
    cc = cells[first]
    q0[cand[first]] = (np.stack([I[cc], J_[cc], K_[cc]], axis=-1) + s[first]) * h


def cell_search_invert(disp_grid, L, targets, cell_ok=None, tol=1e-12, maxit=30):
    """Invert q0 -> q0 + disp(q0) by searching the deformed lattice cells.

    Only cells whose eight corner labels are all usable (``cell_ok``) take part,
    so frozen or runaway labels never capture a target. Returns (q0, hits):
    ``hits`` counts the cells containing each target (0 means uncovered, >1 a
    folded map); q0 comes from the first hit in lattice order.
    """
    disp_grid = np.ascontiguousarray(disp_grid, dtype=float)
    n = disp_grid.shape[0]
    h = L / n
    ax = np.arange(n) * h
    pos = np.ascontiguousarray(np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1) + disp_grid)
    cell_ok = np.ones((n, n, n), dtype=np.bool_) if cell_ok is None else np.ascontiguousarray(cell_ok, dtype=np.bool_)
    targets = np.ascontiguousarray(targets, dtype=float)
    M = targets.shape[0]
    q0 = np.full((M, 3), np.nan)
    hits = np.zeros(M, dtype=np.int64)
    tol_abs = float(tol) * L
    if HAVE_NUMBA:
        nbins = max(1, int(round(M ** (1.0 / 3.0))))
        order, start = _bin_points(targets, L, nbins)
        _cell_search_nb(pos, float(L), cell_ok, targets, order, start, nbins, tol_abs, int(maxit), q0, hits)
    else:
        _cell_search_np(pos, float(L), cell_ok, targets, tol_abs, int(maxit), q0, hits)
    return q0, hits


def cells_clear_of(flagged):
    """Cells (indexed by their lowest corner) none of whose eight corners is flagged."""
    f = np.asarray(flagged, dtype=bool)
    bad = np.zeros_like(f)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                bad |= np.roll(f, shift=(-di, -dj, -dk), axis=(0, 1, 2))
    return ~bad


@njit(cache=True, parallel=True)
def _trilinear_nb(grid, L, pts, out):
    empty = np.empty((0, 3))
    for p in prange(pts.shape[0]):
        _trilinear_point(grid, L, pts[p, 0], pts[p, 1], pts[p, 2], out[p], empty)


def trilinear_periodic(grid, L, pts):
    """Periodic trilinear interpolation of grid (nx, ny, nz, C) at points (N, 3)."""
    grid = np.ascontiguousarray(grid, dtype=float)
    pts = np.ascontiguousarray(pts, dtype=float)
    if not HAVE_NUMBA:
        return _trilinear_np(grid, L, pts)
    out = np.empty((pts.shape[0], grid.shape[3]))
    _trilinear_nb(grid, float(L), pts, out)
    return out
