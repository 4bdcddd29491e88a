import json
import subprocess
import sys

import pytest

from diractraj import cli

SMALL = {"version": 1, "grid": {"n": 16, "L": 10.0}, "labels": {"per_axis": 4, "angle_nodes": [2, 2, 4]},
         "time": {"T": 0.1, "dt": 0.02},
         "initial": {"kind": "gaussian_packet", "width": 2.0, "polarization": [1, 0, 0, "2j"]}}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_verify_passes(tmp_path):
    code, report = cli.run(["verify", "--out", str(tmp_path)])
    assert code == cli.EXIT_PASS and report["pass"]
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["subcommand"] == "verify"
    assert all(c["pass"] for c in on_disk["checks"] if c["hard"])


def test_trajectory_round_trip_through_files(tmp_path, small_config):
    out = str(tmp_path)
    assert cli.run(["evolve-traj", "--config", str(small_config), "--out", out])[0] == cli.EXIT_PASS
    assert (tmp_path / "bundle_R.dtb").exists() and (tmp_path / "bundle_I.dtb").exists()
    code, rep = cli.run(["reconstruct", "--config", str(small_config), "--out", out,
                         "--bundles", str(tmp_path / "bundle_R.dtb"), str(tmp_path / "bundle_I.dtb")])
    assert code == cli.EXIT_PASS
    assert "reconstructed_T.dtsnap" in rep["artifacts"]


def test_evolve_ref_writes_snapshot(tmp_path, small_config):
    code, rep = cli.run(["evolve-ref", "--config", str(small_config), "--out", str(tmp_path)])
    assert code == cli.EXIT_PASS
    assert (tmp_path / "reference_T.dtsnap").exists()


def test_failing_check_exits_one(tmp_path, monkeypatch):
    from diractraj.pipelines import check

    def fake(cfg):
        return [check("always_off", 2.0, 1.0), check("informational", 5.0, 1.0, hard=False)], {}

    monkeypatch.setitem(cli.PIPELINES, "verify", fake)
    code, rep = cli.run(["verify", "--out", str(tmp_path)])
    assert code == cli.EXIT_FAIL and not rep["pass"]


def test_soft_checks_do_not_fail_the_run(tmp_path, monkeypatch):
    from diractraj.pipelines import check

    monkeypatch.setitem(cli.PIPELINES, "verify", lambda cfg: ([check("soft", 5.0, 1.0, hard=False)], {}))
    assert cli.run(["verify", "--out", str(tmp_path)])[0] == cli.EXIT_PASS


def test_invalid_config_exits_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 7}))
    code, rep = cli.run(["verify", "--config", str(bad), "--out", str(tmp_path)])
    assert code == cli.EXIT_ERROR and "ConfigInvalid" in rep["error"]


def test_missing_bundle_exits_two(tmp_path):
    code, _ = cli.run(["reconstruct", "--out", str(tmp_path)])
    assert code == cli.EXIT_ERROR


def test_step_flag_is_validated(tmp_path):
    code, _ = cli.run(["evolve-traj", "--dt", "1.0", "--out", str(tmp_path)])
    assert code == cli.EXIT_ERROR


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "diractraj.cli", "covariance", "--out", str(tmp_path),
                          "--eps", "0.001,0.0005,0.0"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "[PASS]" in res.stdout
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["covariance"]["eps"] == [0.001, 0.0005, 0.0]
