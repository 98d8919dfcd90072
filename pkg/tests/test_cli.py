import json

import numpy as np
import pytest
from typer.testing import CliRunner

from mbmapq import app
from services.report_service import write_json

runner = CliRunner()

MM1 = """name = "mm1"
env_dim = 1
C = [[-0.5]]

[[classes]]
D = [[0.5]]
batch = { geometric_mean = 1 }
service = { kind = "exponential", params = { rate = 1.0 } }
"""

BROKEN = """name = "broken"
env_dim = 2
C = [[-1.0, 0.5], [1.0, -1.0]]

[[classes]]
D = [[0.2, 0.0], [0.0, 0.0]]
batch = { geometric_mean = 1 }
service = { kind = "exponential", params = { rate = 1.0 } }
"""

OVERLOADED = """name = "overloaded"
env_dim = 1
C = [[-0.9]]

[[classes]]
D = [[0.9]]
batch = { geometric_mean = 1 }
service = { kind = "exponential", params = { rate = 0.5 } }
"""


@pytest.fixture(scope="module")
def mm1_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "mm1.toml"
    path.write_text(MM1)
    return path


@pytest.fixture(scope="module")
def analysis_dir(mm1_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("analysis")
    result = runner.invoke(app, ["analyze", "--model", str(mm1_file), "--out", str(out),
                                 "--eps", "1e-10", "--np", "60"])
    assert result.exit_code == 0, result.output
    return out


def test_validate_ok(mm1_file):
    result = runner.invoke(app, ["validate", "--model", str(mm1_file)])
    assert result.exit_code == 0
    assert "FAILED" not in result.output


def test_validate_reports_row_sums(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text(BROKEN)
    result = runner.invoke(app, ["validate", "--model", str(path)])
    assert result.exit_code == 2
    assert "FAILED" in result.output


def test_missing_model_file(tmp_path):
    result = runner.invoke(app, ["validate", "--model", str(tmp_path / "none.toml")])
    assert result.exit_code == 2


def test_unstable_model_exits_3(tmp_path):
    path = tmp_path / "overloaded.toml"
    path.write_text(OVERLOADED)
    result = runner.invoke(app, ["analyze", "--model", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 3


def test_analyze_writes_artifacts(analysis_dir):
    names = {p.name for p in analysis_dir.iterdir()}
    assert {"p_joint.csv", "p_total.csv", "ccdf_total.csv", "q_class_1.csv", "marginal_class_1.csv",
            "summary.json", "manifest.json"} <= names
    summary = json.loads((analysis_dir / "summary.json").read_text())
    assert summary["mean_total"] == pytest.approx(1.0, rel=1e-6)
    assert summary["rho"] == pytest.approx(0.5)
    assert summary["mean_workload"] == pytest.approx(1.0, rel=1e-10)
    assert summary["ledger"]["N_p"] == 60
    assert all(type(ok) is bool for ok in summary["error_bounds"]["checks"].values())
    assert summary["workload"]["v0"] == pytest.approx([0.5])
    manifest = json.loads((analysis_dir / "manifest.json").read_text())
    assert manifest["command"] == "analyze"


def test_csv_layout(analysis_dir):
    raw = (analysis_dir / "ccdf_total.csv").read_bytes()
    assert b"\r\n" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "n,ccdf"
    n, value = lines[1].split(",")
    assert n == "0" and float(value) == pytest.approx(0.5, abs=1e-9)
    header = (analysis_dir / "p_joint.csv").read_text().splitlines()[0]
    assert header == "n_1,state_1,mass"


def test_total_mode(mm1_file, tmp_path):
    result = runner.invoke(app, ["analyze", "--model", str(mm1_file), "--out", str(tmp_path),
                                 "--eps", "1e-10", "--np", "60", "--mode", "total"])
    assert result.exit_code == 0, result.output
    assert not (tmp_path / "p_joint.csv").exists()
    assert json.loads((tmp_path / "summary.json").read_text())["mode"] == "total"


def test_simulate_rejects_zero_replications(mm1_file, tmp_path):
    result = runner.invoke(app, ["simulate", "--model", str(mm1_file), "--out", str(tmp_path), "--reps", "0"])
    assert result.exit_code == 2


def test_compare_agreeing_runs(mm1_file, analysis_dir, tmp_path):
    sim_dir = tmp_path / "sim"
    result = runner.invoke(app, ["simulate", "--model", str(mm1_file), "--out", str(sim_dir),
                                 "--horizon", "20000", "--reps", "8", "--seed", "11", "--workers", "1"])
    assert result.exit_code == 0, result.output
    assert (sim_dir / "sim_hist.csv").read_text().splitlines()[0] == "n_1,state_1,mass,mass_se"
    result = runner.invoke(app, ["compare", "--analysis", str(analysis_dir), "--simulation", str(sim_dir),
                                 "--out", str(tmp_path / "cmp")])
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "cmp" / "compare.json").read_text())["passed"] is True
    assert json.loads((tmp_path / "cmp" / "manifest.json").read_text())["command"] == "compare"


def test_compare_disagreeing_runs(analysis_dir, tmp_path):
    sim_dir = tmp_path / "sim"
    sim_dir.mkdir()
    (sim_dir / "sim_summary.json").write_text(json.dumps({
        "mean_total": 3.0, "mean_total_se": 0.01,
        "empty_probability": 0.5, "empty_probability_se": 0.01,
        "mean_workload": 1.0, "mean_workload_se": 0.01,
        "mean_k": [3.0], "mean_k_se": [0.01],
    }))
    result = runner.invoke(app, ["compare", "--analysis", str(analysis_dir), "--simulation", str(sim_dir),
                                 "--out", str(tmp_path / "cmp")])
    assert result.exit_code == 5
    assert json.loads((tmp_path / "cmp" / "compare.json").read_text())["passed"] is False
    assert (tmp_path / "cmp" / "manifest.json").is_file()


def test_compare_empty_directory(analysis_dir, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = runner.invoke(app, ["compare", "--analysis", str(analysis_dir), "--simulation", str(empty)])
    assert result.exit_code == 2


def test_json_writer_takes_numpy_scalars(tmp_path):
    path = write_json(tmp_path / "out.json", {"ok": np.bool_(True), "n": np.int64(3), "x": np.float64(0.5),
                                              "row": np.array([1.0, 2.0])})
    assert json.loads(path.read_text()) == {"ok": True, "n": 3, "x": 0.5, "row": [1.0, 2.0]}


def test_validate_writes_report_and_manifest(mm1_file, tmp_path):
    result = runner.invoke(app, ["validate", "--model", str(mm1_file), "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert json.loads((tmp_path / "validation.json").read_text())["passed"] is True
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "validate"


def test_rerun_is_byte_identical(mm1_file, analysis_dir, tmp_path):
    result = runner.invoke(app, ["analyze", "--model", str(mm1_file), "--out", str(tmp_path),
                                 "--eps", "1e-10", "--np", "60"])
    assert result.exit_code == 0, result.output
    for first in analysis_dir.glob("*.csv"):
        assert (tmp_path / first.name).read_bytes() == first.read_bytes(), first.name
    assert (tmp_path / "summary.json").read_bytes() == (analysis_dir / "summary.json").read_bytes()


def test_compare_defaults_to_a_subdirectory(mm1_file, tmp_path):
    analysis = tmp_path / "analysis"
    assert runner.invoke(app, ["analyze", "--model", str(mm1_file), "--out", str(analysis),
                               "--eps", "1e-10", "--np", "60"]).exit_code == 0
    sim = tmp_path / "sim"
    assert runner.invoke(app, ["simulate", "--model", str(mm1_file), "--out", str(sim),
                               "--horizon", "5000", "--reps", "4", "--seed", "3", "--workers", "1"]).exit_code == 0
    runner.invoke(app, ["compare", "--analysis", str(analysis), "--simulation", str(sim)])
    assert (analysis / "compare" / "compare.json").is_file()
    assert json.loads((analysis / "manifest.json").read_text())["command"] == "analyze"
    assert json.loads((analysis / "compare" / "manifest.json").read_text())["model_path"] == str(mm1_file)


@pytest.mark.slow
def test_compare_poisson_example(models_dir, tmp_path):
    model = models_dir / "ex1_n_gi_g1.toml"
    assert runner.invoke(app, ["analyze", "--model", str(model), "--out", str(tmp_path / "a")]).exit_code == 0
    result = runner.invoke(app, ["simulate", "--model", str(model), "--out", str(tmp_path / "s"),
                                 "--horizon", "1e6", "--reps", "20", "--seed", "2024", "--workers", "4"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(app, ["compare", "--analysis", str(tmp_path / "a"), "--simulation", str(tmp_path / "s")])
    assert result.exit_code == 0, result.output
