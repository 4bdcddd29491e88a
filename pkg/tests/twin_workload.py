"""Deterministic kernel workload; writes its results to the .npz path given on the command line.

Run once with numba and once with DIRACTRAJ_DISABLE_NUMBA=1 to compare the two backends.
"""
import sys

import numpy as np

from diractraj import angular as ang
from diractraj import kernels
from diractraj.reference import SpectralOracle, gaussian_packet_field, plane_wave_field
from diractraj.trajectory import LabelGrid, integrate_bundle, reconstruct_majorana


def main(path):
    rng = np.random.default_rng(11)
    out = {"numba": np.array(kernels.HAVE_NUMBA)}
    field = rng.normal(size=(8, 8, 8, 3))
    pts = rng.uniform(-2.0, 7.0, size=(300, 3))
    out["lagrange_val"], out["lagrange_grad"] = kernels.lagrange_interpolate(field, 5.0, pts, order=4)
    out["trilinear"] = kernels.trilinear_periodic(field, 5.0, pts)
    disp = 0.05 * rng.normal(size=(6, 6, 6, 3))
    targets = rng.uniform(0, 5.0, size=(200, 3))
    out["invert_q0"], out["invert_ok"] = kernels.invert_periodic_map(disp, 5.0, targets)
    out["search_q0"], out["search_hits"] = kernels.cell_search_invert(disp, 5.0, targets)

    grid = LabelGrid(3, 20.0, ang.AngularNodes(2, 2, 4), plane_wave_field(3, 20.0))
    b = integrate_bundle(grid, mode="self_contained", dt=0.01, T=0.1, branch="R")
    out["pw_q"], out["pw_J"], out["pw_flags"] = b.q, b.J, b.flags

    f = gaussian_packet_field(16, 12.0, 1.5, polarization=(1, 0, 0, 2j))
    g = LabelGrid(4, 12.0, ang.AngularNodes(2, 2, 4), f)
    sc = integrate_bundle(g, mode="self_contained", dt=0.02, T=0.1, branch="I", on_collapse="flag")
    va = integrate_bundle(g, mode="validation", dt=0.02, T=0.1, branch="R", oracle=SpectralOracle(f))
    out["sc_q"], out["sc_J"], out["sc_flags"] = sc.q, sc.J, sc.flags
    out["va_q"], out["va_J"] = va.q, va.J
    out["recon"] = reconstruct_majorana(va, 0.1, 6)[0]
    np.savez(path, **out)


if __name__ == "__main__":
    main(sys.argv[1])
