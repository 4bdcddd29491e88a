"""Binary snapshot and bundle files, with CSV export.

Both formats share one framing::

    offset  size  content
    0       8     magic (b"DTSNAP\\0\\0" or b"DTBUNDL\\0")
    8       4     format version, uint32 little-endian
    12      4     header length H in bytes, uint32 little-endian
    16      H     UTF-8 JSON header, keys sorted
    16+H    ...   raw little-endian arrays, C order, in the order listed by the
                  header's "sections" entry (name, dtype, shape)

Snapshot sections: ``values`` complex128 (n, n, n, 4), components fastest.

Bundle sections: ``flags`` uint8 (Na, Ns), ``psi0`` float64 (Na, Ns), then per
record k the four arrays ``q[k]`` float64 (Na, Ns, 3), ``theta[k]`` float64
(Na, 3), ``psi[k]`` float64 (Na, Ns), ``J[k]`` float64 (Na, Ns), and finally
the initial field ``initial`` complex128 (m, m, m, 4) needed to resample psi0
during reconstruction. Angles depend only on the angle node, so theta is
stored once per node rather than per label.

Floats are written bit-for-bit, so load(save(x)) == x exactly.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from . import angular as ang
from .errors import FileFormatError
from .params import PhysicalParams
from .reference import SpinorField
from .trajectory import LabelGrid, TrajectoryBundle

SNAP_MAGIC = b"DTSNAP\0\0"
BUNDLE_MAGIC = b"DTBUNDL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
# bundle stats that vary between identical runs stay out of the file
_VOLATILE_STATS = ("runtime_s",)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_json(obj):
    """Deterministic JSON: sorted keys, repr-exact floats."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1, allow_nan=True)


def _write(path, magic, header, arrays):
    header = dict(header)
    header["sections"] = [[name, arr.dtype.str, list(arr.shape)] for name, arr in arrays]
    hb = dumps_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def _read(path, magic):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FileFormatError("file shorter than the fixed prefix", offset=len(data))
    got, version, hlen = _PREFIX.unpack_from(data, 0)
    if got != magic:
        raise FileFormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported format version {version}", offset=8)
    start = _PREFIX.size
    if start + hlen > len(data):
        raise FileFormatError("header runs past end of file", offset=len(data))
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise FileFormatError(f"unreadable header: {exc}", offset=start + pos) from exc
    off = start + hlen
    arrays = {}
    for sec in header.get("sections", []):
        try:
            name, dt, shape = sec
            dtype = np.dtype(dt)
            count = int(np.prod(shape, dtype=np.int64))
        except (TypeError, ValueError) as exc:
            raise FileFormatError(f"malformed section entry {sec!r}", offset=start) from exc
        if dtype.byteorder == ">":
            raise FileFormatError(f"section {name} is not little-endian", offset=start)
        nbytes = count * dtype.itemsize
        if off + nbytes > len(data):
            raise FileFormatError(f"section {name} truncated", offset=len(data))
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise FileFormatError(f"{len(data) - off} trailing bytes after last section", offset=off)
    return header, arrays


def _params(header, where):
    try:
        return PhysicalParams(**header[where])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"invalid physical parameters: {exc}", offset=_PREFIX.size) from exc


# ---------------------------------------------------------------------------
# snapshots

def save_snapshot(field: SpinorField, path):
    header = {"kind": "snapshot", "n": field.n, "L": field.L, "time": field.time, "params": field.params.to_dict()}
    _write(path, SNAP_MAGIC, header, [("values", field.values.astype("<c16"))])


def load_snapshot(path) -> SpinorField:
    header, arrays = _read(path, SNAP_MAGIC)
    if "values" not in arrays:
        raise FileFormatError("snapshot has no values section", offset=_PREFIX.size)
    vals = arrays["values"]
    n = header.get("n")
    if vals.shape != (n, n, n, 4):
        raise FileFormatError(f"values shape {vals.shape} disagrees with n = {n}", offset=_PREFIX.size)
    try:
        L, t = float(header["L"]), float(header["time"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"snapshot header lacks a valid {exc}", offset=_PREFIX.size) from exc
    return SpinorField(vals, L, t, _params(header, "params"))


def snapshot_to_csv(field: SpinorField, path):
    """One row per grid point: indices, coordinates, then Re/Im of the four components."""
    x = field.coords()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "x", "y", "z"] + [f"{p}{a}" for a in range(4) for p in ("re", "im")])
        for idx in np.ndindex(field.n, field.n, field.n):
            v = field.values[idx]
            row = list(idx) + [repr(float(x[d])) for d in idx]
            row += [repr(float(f)) for a in range(4) for f in (v[a].real, v[a].imag)]
            w.writerow(row)


def snapshot_from_csv(path, L, time=0.0, params=None) -> SpinorField:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = int(round(len(rows) ** (1.0 / 3.0)))
    if n**3 != len(rows):
        raise FileFormatError("row count is not a perfect cube")
    vals = np.empty((n, n, n, 4), dtype=complex)
    idx = rows[:, :3].astype(int)
    comp = rows[:, 6::2] + 1j * rows[:, 7::2]
    vals[idx[:, 0], idx[:, 1], idx[:, 2]] = comp
    return SpinorField(vals, L, time, params or PhysicalParams())


# ---------------------------------------------------------------------------
# bundles

def save_bundle(bundle: TrajectoryBundle, path):
    init = bundle.grid.initial
    header = {
        "kind": "bundle",
        "params": bundle.params.to_dict(),
        "L": bundle.L,
        "n": bundle.n,
        "nodes": list(bundle.nodes.shape),
        "mode": bundle.mode,
        "branch": bundle.branch,
        "dt": bundle.dt,
        "times": [float(t) for t in bundle.times],
        "stats": {k: v for k, v in bundle.stats.items() if k not in _VOLATILE_STATS},
        "grid": {"pad": bundle.grid.pad, "interp_order": bundle.grid.interp_order},
        "initial": {"n": init.n, "L": init.L, "time": init.time, "params": init.params.to_dict()},
    }
    arrays = [("flags", bundle.flags.astype("u1")), ("psi0", bundle.psi0.astype("<f8"))]
    for k in range(len(bundle.times)):
        arrays += [
            (f"q[{k}]", bundle.q[k].astype("<f8")),
            (f"theta[{k}]", bundle.theta(k).astype("<f8")),
            (f"psi[{k}]", bundle.psi[k].astype("<f8")),
            (f"J[{k}]", bundle.J[k].astype("<f8")),
        ]
    arrays.append(("initial", init.values.astype("<c16")))
    _write(path, BUNDLE_MAGIC, header, arrays)


def load_bundle(path) -> TrajectoryBundle:
    header, arrays = _read(path, BUNDLE_MAGIC)
    try:
        params = _params(header, "params")
        nodes = ang.AngularNodes(*header["nodes"])
        ini = header["initial"]
        initial = SpinorField(arrays["initial"], float(ini["L"]), float(ini["time"]), _params(ini, "params"))
        grid = LabelGrid(int(header["n"]), float(header["L"]), nodes, initial, **header["grid"])
        R = len(header["times"])
        q = np.stack([arrays[f"q[{k}]"] for k in range(R)])
        psi = np.stack([arrays[f"psi[{k}]"] for k in range(R)])
        J = np.stack([arrays[f"J[{k}]"] for k in range(R)])
        return TrajectoryBundle(params=params, L=float(header["L"]), n=int(header["n"]), nodes=nodes,
                                mode=header["mode"], branch=header["branch"], dt=float(header["dt"]),
                                times=np.array(header["times"], dtype=float), q=q, psi=psi, J=J,
                                flags=arrays["flags"], psi0=arrays["psi0"], stats=header["stats"], grid=grid)
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"bundle lacks a valid entry {exc}", offset=_PREFIX.size) from exc


def bundle_to_csv(bundle: TrajectoryBundle, path, records=None):
    """Long-format CSV: one row per (record, angle node, spatial label)."""
    recs = range(len(bundle.times)) if records is None else records
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "t", "node", "label", "flag", "q1", "q2", "q3", "alpha", "beta", "gamma", "psi", "J"])
        for k in recs:
            th = bundle.theta(k)
            t = repr(float(bundle.times[k]))
            for a in range(bundle.flags.shape[0]):
                for s in range(bundle.flags.shape[1]):
                    q = bundle.q[k, a, s]
                    w.writerow([k, t, a, s, int(bundle.flags[a, s])] + [repr(float(v)) for v in q]
                               + [repr(float(v)) for v in th[a]]
                               + [repr(float(bundle.psi[k, a, s])), repr(float(bundle.J[k, a, s]))])
