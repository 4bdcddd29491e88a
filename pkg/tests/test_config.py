import json

import pytest

from diractraj.config import DEFAULTS, RunConfig, parse_complex
from diractraj.errors import ConfigInvalid


def test_defaults_validate():
    cfg = RunConfig.from_dict({})
    assert cfg.raw == DEFAULTS
    assert cfg.branches == ("R", "I")


def test_load_from_file_and_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"version": 1, "grid": {"n": 32, "L": 20.0}, "branch": "R"}))
    cfg = RunConfig.load(path).override(dt=0.01, workers=3, deterministic=True)
    assert cfg.branches == ("R",)
    assert cfg.dt() == 0.01
    assert cfg.workers == 1  # deterministic runs are single-threaded


@pytest.mark.parametrize("patch", [
    {"version": 2},
    {"unknown": 1},
    {"grid": {"n": 1}},
    {"grid": {"L": -1.0}},
    {"time": {"dt": 0.1}},
    {"mode": "fast"},
    {"branch": "X"},
    {"labels": {"angle_nodes": [4, 4]}},
    {"initial": {"kind": "gaussian_packet", "width": 0.5}},
    {"initial": {"kind": "plane_wave", "polarization": [0, 0, 0, 0]}},
    {"initial": {"kind": "file"}},
    {"solver": {"on_collapse": "ignore"}},
    {"checks": {"halvings": 0}},
    {"workers": 0},
])
def test_invalid_configs_are_rejected(patch):
    with pytest.raises(ConfigInvalid):
        RunConfig.from_dict(patch)


def test_unreadable_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigInvalid):
        RunConfig.load(tmp_path / "bad.json")
    with pytest.raises(ConfigInvalid):
        RunConfig.load(tmp_path / "missing.json")


@pytest.mark.parametrize("text, value", [(1, 1), ("2j", 2j), ([0.5, -1], 0.5 - 1j), ("1 + 2j", 1 + 2j)])
def test_parse_complex(text, value):
    assert parse_complex(text) == value
