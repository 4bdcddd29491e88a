"""Versioned JSON run configuration.

Example (every key optional; missing keys take the defaults below)::

    {
      "version": 1,
      "params": {"m": 1.0, "hbar": 1.0, "c": 1.0},
      "grid": {"n": 32, "L": 20.0},
      "time": {"dt": null, "T": null},
      "mode": "validation",
      "branch": "both",
      "labels": {"per_axis": 8, "angle_nodes": [4, 4, 8]},
      "initial": {"kind": "gaussian_packet", "width": 2.0, "center": null,
                  "momentum": [0, 0, 0], "polarization": [1, 0, 0, "2j"]},
      "solver": {"step_tol": 1e-5, "on_collapse": "flag", "record_every": null},
      "checks": {"eps": [0.001, 0.0, 0.0], "halvings": 1, "refine": false},
      "seed": 0,
      "workers": 1,
      "deterministic": false,
      "out": "out"
    }

``time.dt`` and ``time.T`` are absolute times; null means the subcommand's own
default (usually 0.01/omega and 1/omega). Complex numbers may be written as
numbers, [re, im] pairs or strings such as "2j".
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid
from .params import PhysicalParams
from .trajectory import MAX_DT_OMEGA

SCHEMA_VERSION = 1
MIN_POINTS_PER_WIDTH = 4

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "params": {"m": 1.0, "hbar": 1.0, "c": 1.0},
    "grid": {"n": 32, "L": 20.0},
    "time": {"dt": None, "T": None},
    "mode": "validation",
    "branch": "both",
    "labels": {"per_axis": 8, "angle_nodes": [4, 4, 8]},
    "initial": {"kind": "gaussian_packet", "width": 2.0, "center": None, "momentum": [0.0, 0.0, 0.0],
                "polarization": [1, 0, 0, "2j"]},
    "solver": {"step_tol": 1e-5, "on_collapse": "flag", "record_every": None},
    "checks": {"eps": [1e-3, 0.0, 0.0], "halvings": 1, "refine": False},
    "seed": 0,
    "workers": 1,
    "deterministic": False,
    "out": "out",
}

_INITIAL_KINDS = ("plane_wave", "gaussian_packet", "file")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k != "initial":
            if not isinstance(v, dict):
                raise ConfigInvalid(f"{path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_complex(x):
    if isinstance(x, (list, tuple)) and len(x) == 2:
        return complex(float(x[0]), float(x[1]))
    if isinstance(x, str):
        return complex(x.replace(" ", ""))
    return complex(x)


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigInvalid("configuration must be a JSON object")
        version = data.get("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported config version {version!r}; expected {SCHEMA_VERSION}")
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def override(self, **kw):
        """Apply command-line overrides (None values are ignored) and revalidate."""
        r = self.raw
        setters = {
            "mode": lambda v: r.__setitem__("mode", v),
            "dt": lambda v: r["time"].__setitem__("dt", v),
            "T": lambda v: r["time"].__setitem__("T", v),
            "labels_per_axis": lambda v: r["labels"].__setitem__("per_axis", v),
            "angle_nodes": lambda v: r["labels"].__setitem__("angle_nodes", list(v)),
            "branch": lambda v: r.__setitem__("branch", v),
            "eps": lambda v: r["checks"].__setitem__("eps", list(v)),
            "halvings": lambda v: r["checks"].__setitem__("halvings", v),
            "workers": lambda v: r.__setitem__("workers", v),
            "deterministic": lambda v: r.__setitem__("deterministic", v),
            "out": lambda v: r.__setitem__("out", v),
        }
        for k, v in kw.items():
            if v is not None:
                setters[k](v)
        self.validate()
        return self

    # typed views -----------------------------------------------------------

    @property
    def params(self) -> PhysicalParams:
        return PhysicalParams(**self.raw["params"])

    @property
    def n(self):
        return int(self.raw["grid"]["n"])

    @property
    def L(self):
        return float(self.raw["grid"]["L"])

    def dt(self, default_omega_units=0.01):
        dt = self.raw["time"]["dt"]
        return default_omega_units / self.params.omega if dt is None else float(dt)

    def T(self, default_omega_units=1.0):
        T = self.raw["time"]["T"]
        return default_omega_units / self.params.omega if T is None else float(T)

    @property
    def workers(self):
        return 1 if self.raw["deterministic"] else int(self.raw["workers"])

    @property
    def angle_nodes(self):
        return tuple(int(v) for v in self.raw["labels"]["angle_nodes"])

    @property
    def labels_per_axis(self):
        return int(self.raw["labels"]["per_axis"])

    @property
    def branches(self):
        b = self.raw["branch"]
        return ("R", "I") if b == "both" else (b,)

    @property
    def eps(self):
        return np.asarray(self.raw["checks"]["eps"], dtype=float)

    @property
    def out(self):
        return Path(self.raw["out"])

    # validation ------------------------------------------------------------

    def validate(self):
        r = self.raw
        try:
            p = self.params
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"params: {exc}") from exc
        n, L = r["grid"]["n"], r["grid"]["L"]
        if not (isinstance(n, int) and n >= 2):
            raise ConfigInvalid("grid.n must be an integer >= 2")
        if not (isinstance(L, (int, float)) and np.isfinite(L) and L > 0):
            raise ConfigInvalid("grid.L must be a positive number")
        for key in ("dt", "T"):
            v = r["time"][key]
            if v is not None and not (isinstance(v, (int, float)) and np.isfinite(v) and v >= 0):
                raise ConfigInvalid(f"time.{key} must be a non-negative number or null")
        if r["time"]["dt"] is not None:
            dt = float(r["time"]["dt"])
            if dt <= 0:
                raise ConfigInvalid("time.dt must be positive")
            if dt * p.omega > MAX_DT_OMEGA * (1 + 1e-12):
                raise ConfigInvalid(f"dt * omega = {dt * p.omega:g} exceeds {MAX_DT_OMEGA}")
        if r["mode"] not in ("validation", "self_contained"):
            raise ConfigInvalid("mode must be 'validation' or 'self_contained'")
        if r["branch"] not in ("R", "I", "both"):
            raise ConfigInvalid("branch must be 'R', 'I' or 'both'")
        lab = r["labels"]
        if not (isinstance(lab["per_axis"], int) and lab["per_axis"] >= 2):
            raise ConfigInvalid("labels.per_axis must be an integer >= 2")
        nodes = lab["angle_nodes"]
        if not (isinstance(nodes, (list, tuple)) and len(nodes) == 3 and all(isinstance(v, int) and v >= 1 for v in nodes)):
            raise ConfigInvalid("labels.angle_nodes must be three positive integers")
        self._validate_initial(r["initial"], L, n)
        sol = r["solver"]
        if sol["on_collapse"] not in ("raise", "flag"):
            raise ConfigInvalid("solver.on_collapse must be 'raise' or 'flag'")
        if not (isinstance(sol["step_tol"], (int, float)) and sol["step_tol"] > 0):
            raise ConfigInvalid("solver.step_tol must be positive")
        eps = r["checks"]["eps"]
        if not (isinstance(eps, (list, tuple)) and len(eps) == 3):
            raise ConfigInvalid("checks.eps must be a 3-vector")
        if not (isinstance(r["checks"]["halvings"], int) and r["checks"]["halvings"] >= 1):
            raise ConfigInvalid("checks.halvings must be an integer >= 1")
        if not (isinstance(r["workers"], int) and r["workers"] >= 1):
            raise ConfigInvalid("workers must be a positive integer")
        if not isinstance(r["seed"], int):
            raise ConfigInvalid("seed must be an integer")

    @staticmethod
    def _validate_initial(ini, L, n):
        if not isinstance(ini, dict) or ini.get("kind") not in _INITIAL_KINDS:
            raise ConfigInvalid(f"initial.kind must be one of {_INITIAL_KINDS}")
        kind = ini["kind"]
        if kind in ("plane_wave", "gaussian_packet"):
            pol = ini.get("polarization", [1, 0, 0, 0])
            try:
                vec = [parse_complex(v) for v in pol]
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid(f"initial.polarization: {exc}") from exc
            if len(vec) != 4 or not any(vec):
                raise ConfigInvalid("initial.polarization must be four complex numbers, not all zero")
        if kind == "gaussian_packet":
            width = ini.get("width", 2.0)
            if not (isinstance(width, (int, float)) and width > 0):
                raise ConfigInvalid("initial.width must be positive")
            # resolution is judged on the amplitude's standard deviation, sqrt(2) times the density width
            pts = np.sqrt(2.0) * width / (L / n)
            if pts < MIN_POINTS_PER_WIDTH:
                raise ConfigInvalid(f"grid resolves the packet amplitude width by {pts:.2f} < {MIN_POINTS_PER_WIDTH} points")
            c = ini.get("center")
            if c is not None and (len(c) != 3 or any(not (0 <= float(v) < L) for v in c)):
                raise ConfigInvalid("initial.center must lie inside the box")
            if len(ini.get("momentum", [0, 0, 0])) != 3:
                raise ConfigInvalid("initial.momentum must be a 3-vector")
        if kind == "file" and not isinstance(ini.get("path"), str):
            raise ConfigInvalid("initial.path must name a snapshot file")

    def to_dict(self):
        return copy.deepcopy(self.raw)
