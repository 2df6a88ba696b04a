import json

import numpy as np
import pytest

from lvlab import cli
from lvlab.model import ConfigError

FAST = ["--seed", "7", "--threads", "1", "--quiet"]


def test_demo_twice_identical(tmp_path):
    for run in ("a", "b"):
        assert cli.run_command(["demo", *FAST, "--out", str(tmp_path / run)]) == 0
    a = (tmp_path / "a" / "loss_history.csv").read_bytes()
    b = (tmp_path / "b" / "loss_history.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_demo_seed_changes_history(tmp_path):
    assert cli.run_command(["demo", *FAST, "--out", str(tmp_path / "a")]) == 0
    assert cli.run_command(["demo", "--seed", "8", "--threads", "1", "--quiet", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "loss_history.csv").read_text() != (tmp_path / "b" / "loss_history.csv").read_text()


def test_reference_1d_csv(tmp_path):
    assert cli.run_command(["reference", "--mode", "ode1d", "--t-end", "20", "--quiet",
                            "--out", str(tmp_path)]) == 0
    data = np.loadtxt(tmp_path / "reference_1d.csv", delimiter=",", skiprows=1)
    assert data[0, 0] == 0.0 and data[-1, 0] == pytest.approx(20.0)
    assert np.all((data[:, 0] >= 0) & (data[:, 0] <= 20))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {"path": "reference_1d.csv", "role": "reference"} in manifest["files"]


def test_reference_2d(tmp_path):
    argv = ["reference", "--mode", "pde2d", "--set", "domain.grid=32", "--set", "domain.t_end=2",
            "--set", "domain.snapshots=3", "--quiet", "--out", str(tmp_path)]
    assert cli.run_command(argv) == 0
    snaps = sorted(tmp_path.glob("reference_2d_0*.csv"))
    assert len(snaps) == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    listed = {f["path"] for f in manifest["files"]}
    assert {p.name for p in snaps} <= listed


def test_train_then_eval(tmp_path, trained_1d):
    out = tmp_path / "eval"
    assert cli.run_command(["eval", "--checkpoint", str(trained_1d["checkpoint"]), "--quiet",
                            "--out", str(out)]) == 0
    rep = json.loads((out / "evaluation_1d.json").read_text())
    assert "r2" in rep
    assert rep["mae_combined"] < cli.EvalConfig().mae_gate
    lines = (out / "evaluation_1d.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    manifest = json.loads((trained_1d["dir"] / "manifest.json").read_text())
    roles = {f["role"] for f in manifest["files"]}
    assert {"checkpoint", "loss-history", "summary"} <= roles
    assert manifest["seeds"]["run"] == 0 and manifest["config"]["collocation"]["interior"] == 1000


def test_analysis_commands(tmp_path, trained_1d):
    ck = str(trained_1d["checkpoint"])
    for cmd in ("spectrum", "recurrence"):
        assert cli.run_command([cmd, "--checkpoint", ck, "--quiet", "--out", str(tmp_path / cmd)]) == 0
    spec = json.loads((tmp_path / "spectrum" / "spectrum.json").read_text())
    assert spec["f_pred"] == pytest.approx(spec["f_true"], rel=0.01)
    rec = json.loads((tmp_path / "recurrence" / "recurrence.json").read_text())
    assert set(rec) == {"reference", "prediction"}
    m = np.loadtxt(tmp_path / "recurrence" / "recurrence_reference.csv", delimiter=",")
    assert m.shape == (2001, 2001)
    assert cli.run_command(["bench", "--checkpoint", ck, "--quiet", "--out", str(tmp_path / "bench")]) == 0
    header = (tmp_path / "bench" / "benchmark.csv").read_text().splitlines()[0]
    assert header == "method,mae,r2,time_ms,speedup"


def test_turing_command(tmp_path):
    assert cli.run_command(["turing", "--quiet", "--k-points", "51", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "turing.json").read_text())
    assert rep["max_growth"] == pytest.approx(0.0, abs=1e-12)
    assert len((tmp_path / "dispersion.csv").read_text().splitlines()) == 52


def test_unknown_flag_exits_1(capsys):
    assert cli.run_command(["demo", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.run_command(["nonsense"]) == 1


def test_invalid_config_rejected(tmp_path):
    out = tmp_path / "bad"
    assert cli.run_command(["train", "--set", "training.lr=-1", "--quiet", "--out", str(out)]) == 1
    assert [p.name for p in out.iterdir()] == ["rejected.txt"]
    assert "learning rate" in (out / "rejected.txt").read_text()


@pytest.mark.parametrize("override", ["bogus=1", "training.nope=3", "ic.u0=-1", "mode=\"3d\"",
                                      "domain.boundary=\"dirichlet\"", "weights.data=-2"])
def test_config_errors(tmp_path, override):
    out = tmp_path / "x"
    assert cli.run_command(["reference", "--set", override, "--quiet", "--out", str(out)]) == 1
    assert not (out / "manifest.json").exists()


def test_toml_config_and_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('mode = "ode1d"\nseed = 3\n[domain]\nt_end = 5.0\n[training]\nepochs = 10\n')
    rc = cli.load_config(str(cfg), ["training.epochs=20", "network.hidden_layers=[8, 8]"])
    assert rc.seed == 3 and rc.training.seed == 3
    assert rc.domain.t_end == 5.0 and rc.training.epochs == 20
    assert rc.network.hidden_layers == (8, 8)
    assert rc.network_spec().seed == 3
    with pytest.raises(ConfigError):
        cli.parse_override("no-equals-sign")


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("USPIL_OUT", str(tmp_path / "env"))
    assert cli.run_command(["reference", "--t-end", "2", "--quiet"]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    # an explicit --out wins over the environment
    assert cli.run_command(["reference", "--t-end", "2", "--quiet", "--out", str(tmp_path / "cli")]) == 0
    assert (tmp_path / "cli" / "manifest.json").exists()


def test_numeric_failure_exits_2(tmp_path):
    # explosive prey growth overflows the explicit scheme within a few steps
    argv = ["reference", "--mode", "pde2d", "--set", "domain.grid=32", "--set", "domain.t_end=20",
            "--set", "params.alpha=1e4", "--quiet", "--out", str(tmp_path)]
    assert cli.run_command(argv) == 2
    assert not (tmp_path / "manifest.json").exists()


def test_manifest_written_last(tmp_path):
    assert cli.run_command(["demo", *FAST, "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    listed = {f["path"] for f in manifest["files"]}
    on_disk = {p.name for p in tmp_path.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    newest = max(tmp_path.iterdir(), key=lambda p: p.stat().st_mtime_ns)
    assert newest.name == "manifest.json"
    assert manifest["versions"]["lvlab"]
