"""The numba kernels and their numpy twins must agree to rounding."""
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from diractraj import kernels

WORKLOAD = Path(__file__).with_name("twin_workload.py")


def _run(tmp_path, disable):
    path = tmp_path / ("numpy.npz" if disable else "numba.npz")
    env = dict(os.environ, DIRACTRAJ_DISABLE_NUMBA="1" if disable else "0")
    subprocess.run([sys.executable, str(WORKLOAD), str(path)], env=env, check=True, capture_output=True)
    return dict(np.load(path))


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree(tmp_path):
    fast, slow = _run(tmp_path, False), _run(tmp_path, True)
    assert bool(fast.pop("numba")) and not bool(slow.pop("numba"))
    for key in fast:
        a, b = fast[key], slow[key]
        assert a.shape == b.shape, key
        if a.dtype.kind in "biu":
            assert np.array_equal(a, b), key
        else:
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-11, err_msg=key)


def test_disable_switch_selects_numpy(tmp_path):
    code = "from diractraj import kernels; print(kernels.HAVE_NUMBA)"
    env = dict(os.environ, DIRACTRAJ_DISABLE_NUMBA="1")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert res.stdout.strip() == "False"
