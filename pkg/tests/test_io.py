import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diractraj import angular as ang
from diractraj import io
from diractraj.errors import FileFormatError
from diractraj.params import PhysicalParams
from diractraj.reference import SpinorField, plane_wave_field
from diractraj.trajectory import LabelGrid, integrate_bundle, reconstruct_majorana

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@pytest.fixture(scope="module")
def bundle():
    grid = LabelGrid(3, 20.0, ang.AngularNodes(2, 2, 4), plane_wave_field(3, 20.0, (1, 0.2j, 0, 0.1)))
    return integrate_bundle(grid, dt=0.01, T=0.05, branch="I", record_every=2)


@given(arrays(np.float64, (2, 2, 2, 4, 2), elements=finite))
def test_snapshot_round_trip_is_bit_exact(tmp_path_factory, raw):
    vals = raw[..., 0] + 1j * raw[..., 1]
    f = SpinorField(vals, 3.5, 0.25, PhysicalParams(m=2.0, hbar=0.5, c=3.0))
    path = tmp_path_factory.mktemp("snap") / "a.dtsnap"
    io.save_snapshot(f, path)
    g = io.load_snapshot(path)
    assert g.values.tobytes() == f.values.tobytes()
    assert (g.L, g.time, g.params) == (f.L, f.time, f.params)


def test_snapshot_csv_round_trip(tmp_path, rng):
    f = SpinorField(rng.normal(size=(3, 3, 3, 4)) + 1j * rng.normal(size=(3, 3, 3, 4)), 2.0)
    io.snapshot_to_csv(f, tmp_path / "a.csv")
    g = io.snapshot_from_csv(tmp_path / "a.csv", 2.0)
    assert g.values.tobytes() == f.values.tobytes()


def test_bundle_round_trip(tmp_path, bundle):
    path = tmp_path / "b.dtb"
    io.save_bundle(bundle, path)
    b = io.load_bundle(path)
    for name in ("times", "q", "psi", "J", "flags", "psi0"):
        assert np.array_equal(getattr(b, name), getattr(bundle, name)), name
    assert b.branch == bundle.branch and b.nodes == bundle.nodes
    ra, _ = reconstruct_majorana(bundle, bundle.times[-1])
    rb, _ = reconstruct_majorana(b, b.times[-1])
    assert ra.tobytes() == rb.tobytes()
    io.save_bundle(b, tmp_path / "c.dtb")
    assert (tmp_path / "c.dtb").read_bytes() == path.read_bytes()


def test_bundle_csv_has_one_row_per_label(tmp_path, bundle):
    io.bundle_to_csv(bundle, tmp_path / "b.csv", records=[0, 1])
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * bundle.flags.size


def _snapshot_bytes(tmp_path):
    path = tmp_path / "s.dtsnap"
    io.save_snapshot(plane_wave_field(2, 1.0), path)
    return path, bytearray(path.read_bytes())


def test_bad_magic_reports_offset_zero(tmp_path):
    path, data = _snapshot_bytes(tmp_path)
    data[0:8] = b"NOTASNAP"
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError) as err:
        io.load_snapshot(path)
    assert err.value.offset == 0


def test_wrong_version_reports_offset(tmp_path):
    path, data = _snapshot_bytes(tmp_path)
    data[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError) as err:
        io.load_snapshot(path)
    assert err.value.offset == 8


def test_truncated_payload_reports_file_length(tmp_path):
    path, data = _snapshot_bytes(tmp_path)
    path.write_bytes(bytes(data[:-5]))
    with pytest.raises(FileFormatError) as err:
        io.load_snapshot(path)
    assert err.value.offset == len(data) - 5


def test_trailing_bytes_are_rejected(tmp_path):
    path, data = _snapshot_bytes(tmp_path)
    path.write_bytes(bytes(data) + b"xx")
    with pytest.raises(FileFormatError) as err:
        io.load_snapshot(path)
    assert err.value.offset == len(data)


def test_corrupt_header_reports_position_inside_header(tmp_path):
    path, data = _snapshot_bytes(tmp_path)
    data[20] = ord("}")
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError) as err:
        io.load_snapshot(path)
    assert 16 <= err.value.offset < len(data)


def test_snapshot_is_not_a_bundle(tmp_path):
    path, _ = _snapshot_bytes(tmp_path)
    with pytest.raises(FileFormatError):
        io.load_bundle(path)
