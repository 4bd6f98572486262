import numpy as np
import pandas as pd
import pytest

import pipeline
import scan_report
from dynamics import ExtendedState, save_snapshots
from run_utils import REPO_ROOT, RESULTS, ConfigError, read_json

CLOSED = """
name = "closed"

[bath]
xi = 0.0

[initial]
kinds = ["C", "D"]
state = [0.0, 1.0, 0.0]

[output]
t_end = 2.0
step = 0.5
"""

FROM_SNAPSHOT = """
[bath]
xi = 0.0

[initial]
kinds = ["A", "C1"]
from_snapshot = true
"""


@pytest.fixture
def closed_config(tmp_path):
    path = tmp_path / "closed.toml"
    path.write_text(CLOSED)
    return path


@pytest.fixture
def stored_fit(tmp_path, closed_config):
    out = tmp_path / "state" / "fit.json"
    assert pipeline.main(["fit-bath", "--config", str(closed_config), "--out", str(out)]) == 0
    return out


def test_config_error_exit_code(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[drive]\namplitude = -1.0\n")
    out = tmp_path / "res" / "evolve.csv"
    assert pipeline.main(["evolve", "--config", str(cfg), "--out", str(out)]) == 2
    meta = read_json(out.parent / "run_meta.json")
    assert meta["status"] == "error" and meta["kind"] == "config"
    assert "drive.amplitude" in meta["error"]
    assert not out.exists()


def test_thread_count_is_checked(tmp_path, closed_config):
    out = tmp_path / "scan.csv"
    assert pipeline.main(["scan", "--config", str(closed_config), "--out", str(out), "--threads", "0"]) == 2


def test_fit_then_evolve(tmp_path, closed_config, stored_fit):
    meta = read_json(stored_fit.parent / "run_meta.json")
    assert meta["status"] == "ok" and meta["n_terms"] == 1

    out = tmp_path / "results" / "evolve.csv"
    code = pipeline.main(["evolve", "--config", str(closed_config), "--fit", str(stored_fit), "--out", str(out)])
    assert code == 0
    df = pd.read_csv(out)
    assert df["t"].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert {"sigma_z_C", "bloch_y_D", "D_C_D"} <= set(df.columns)
    assert read_json(out.parent / "run_meta.json")["rows"] == 5


def test_bounds_needs_a_snapshot(tmp_path, closed_config, stored_fit):
    out = tmp_path / "bounds.csv"
    code = pipeline.main(["bounds", "--config", str(closed_config), "--fit", str(stored_fit), "--out", str(out)])
    assert code == 2
    assert "--snapshot" in read_json(tmp_path / "run_meta.json")["error"]


def test_snapshot_from_another_fit_is_rejected(tmp_path, stored_fit, toy_fit):
    cfg = tmp_path / "snap.toml"
    cfg.write_text(FROM_SNAPSHOT)
    snap = tmp_path / "prepared.json"
    aux = np.zeros((toy_fit.n_terms, 2, 2))
    save_snapshots(snap, {"A": ExtendedState(np.eye(2) / 2, aux), "C1": ExtendedState(np.eye(2) / 2, aux)}, toy_fit)
    out = tmp_path / "evolve.csv"
    code = pipeline.main(["evolve", "--config", str(cfg), "--fit", str(stored_fit), "--snapshot", str(snap),
                          "--out", str(out)])
    assert code == 2
    assert "fit" in read_json(tmp_path / "run_meta.json")["error"]


def _write(path, text):
    path.write_text(text)
    return path


def test_scan_report(tmp_path, capsys):
    df = pd.DataFrame({
        "xi": [0.01, 0.01, 0.1, 0.1],
        "amplitude": [0.5, 5.0, 0.5, 5.0],
        "status": ["ok", "skipped_band", "ok", "skipped_band"],
        "error_unitary_ref": [1e-3, np.nan, 1e-2, np.nan],
        "error_open_opt": [9e-4, np.nan, 8e-3, np.nan],
    })
    text = scan_report.build_report(df)
    assert "error_unitary_ref" in text and "error_open_opt" in text
    assert "diff_rwa" not in text
    assert "Cells not evaluated (2)" in text

    src = tmp_path / "scan.csv"
    df.to_csv(src, index=False)
    assert scan_report.main(["--input", str(src), "--outdir", str(tmp_path / "reports")]) == 0
    assert (tmp_path / "reports" / "scan_summary_latest.md").exists()

    assert scan_report.main(["--input", str(tmp_path / "none.csv"), "--outdir", str(tmp_path / "r2")]) == 2
    assert not (tmp_path / "r2").exists()
    assert "FATAL (config)" in capsys.readouterr().out
    with pytest.raises(ConfigError, match="'amplitude'"):
        scan_report.load_scan(_write(tmp_path / "thin.csv", "xi,status\n0.1,ok\n"))


def test_scan_report_reads_the_scan_output_by_default():
    assert scan_report.build_parser().parse_args([]).input == RESULTS / "scan.csv"


def test_duplicate_output_times_exit_code(tmp_path):
    cfg = tmp_path / "dup.toml"
    cfg.write_text(CLOSED.replace("step = 0.5", "times = [0.5, 1.0, 0.5]"))
    out = tmp_path / "evolve.csv"
    assert pipeline.main(["evolve", "--config", str(cfg), "--out", str(out)]) == 2
    assert "output.times" in read_json(tmp_path / "run_meta.json")["error"]
    assert not out.exists()


def test_python_floor_matches_ci():
    root = REPO_ROOT
    assert "Python 3.11 or newer" in (root / "README.md").read_text(encoding="utf-8")
    assert "3.11" in (root / "requirements.txt").read_text(encoding="utf-8")
    workflow = (root / ".github" / "workflows" / "scan_matrix.yml").read_text(encoding="utf-8")
    assert "python-version: '3.11'" in workflow
