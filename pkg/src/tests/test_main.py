"""
Module: test_main.py
Description:
This module contains tests for the command line interface, run through click's CliRunner.

Tested Features:
    - run: artifacts, reproducibility, endpoint modes and exit codes
    - sweep: resumable theta sweep
    - registry: listing and deleting stored sweep points
    - verify: verdict files and the failure exit code
    - theory: closed-form calculators
"""

import json
import logging
import math

import pytest
from click.testing import CliRunner

from src.analytics.verification import VerificationReport
from src.database.artifacts import artifact_name
from src.main import cli
from src.models.run_config import RunConfig

BASE = {"K": 2, "S": 2, "L": 2, "m_p": 6, "n_k": 8, "R": 2, "E": 1, "seed": 0, "n_test": 50, "eta": 0.1}


@pytest.fixture(autouse=True)
def reset_logging():
    """
    Removes the handler the CLI installs so later tests do not log to a closed stream.
    """
    yield
    for handler in list(logging.getLogger().handlers):
        logging.getLogger().removeHandler(handler)


@pytest.fixture
def runner():
    """
    Provides a CliRunner instance for invoking CLI commands.
    Returns:
        CliRunner: The runner.
    """
    return CliRunner()


def write_config(directory, **changes):
    path = directory / "run.json"
    path.write_text(json.dumps({**BASE, **changes}), encoding="utf-8")
    return path


def test_run_writes_artifacts_and_is_reproducible(runner, tmp_path):
    """
    Tests that a run exits 0, writes its artifacts and that a rerun is byte-identical.
    """
    config_path = write_config(tmp_path)
    config_hash = RunConfig.from_file(config_path).config_hash()
    out = tmp_path / "out"
    result = runner.invoke(cli, ["run", "--config", str(config_path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert f"Run {config_hash[:12]} finished (PromptFolio" in result.output

    report = json.loads((out / artifact_name("report", config_hash, "json")).read_text(encoding="utf-8"))
    assert report["config_hash"] == config_hash
    assert report["eta"] == 0.1
    assert 0.0 <= report["summary"]["empirical"] <= 1.0
    trajectories = (out / artifact_name("trajectories", config_hash, "csv")).read_bytes()
    rounds = (out / artifact_name("rounds", config_hash, "csv")).read_bytes()
    assert trajectories.startswith(b"round,prompt_id,beta,gamma_1,gamma_2,phi_1,phi_2,residual")

    again = runner.invoke(cli, ["run", "--config", str(config_path), "--out", str(out)])
    assert again.exit_code == 0, again.output
    assert (out / artifact_name("trajectories", config_hash, "csv")).read_bytes() == trajectories
    assert (out / artifact_name("rounds", config_hash, "csv")).read_bytes() == rounds


def test_run_dump_data_and_remix(runner, tmp_path):
    """
    Tests the optional data dump and the remix section of the report.
    """
    config_path = write_config(tmp_path)
    config_hash = RunConfig.from_file(config_path).config_hash()
    out = tmp_path / "out"
    result = runner.invoke(cli, ["run", "--config", str(config_path), "--out", str(out), "--dump-data", "--remix"])
    assert result.exit_code == 0, result.output
    data = (out / artifact_name("data", config_hash, "csv")).read_text(encoding="utf-8").splitlines()
    assert len(data) == 1 + 2 * 8 + 2 * 50
    assert (out / artifact_name("bank", config_hash, "json")).exists()
    report = json.loads((out / artifact_name("report", config_hash, "json")).read_text(encoding="utf-8"))
    assert report["remix"]["axis"] == "remix_theta"


def test_run_at_theta_zero_reports_prompt_fl_mode(runner, tmp_path):
    """
    Tests the endpoint mode label in the output.
    """
    config_path = write_config(tmp_path, theta=0.0)
    result = runner.invoke(cli, ["run", "--config", str(config_path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert "PromptFL-equivalent" in result.output


def test_missing_field_exits_with_config_error(runner, tmp_path):
    """
    Tests that a configuration without K exits 2 and names the field.
    """
    record = dict(BASE)
    del record["K"]
    path = tmp_path / "run.json"
    path.write_text(json.dumps(record), encoding="utf-8")
    result = runner.invoke(cli, ["run", "--config", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "'K'" in result.output


def test_broken_json_reports_the_line(runner, tmp_path):
    """
    Tests that a JSON syntax error exits 2 with its line number.
    """
    path = tmp_path / "run.json"
    path.write_text('{\n  "K": 2,\n  oops\n}\n', encoding="utf-8")
    result = runner.invoke(cli, ["run", "--config", str(path)])
    assert result.exit_code == 2
    assert "line 3" in result.output


def test_divergence_exits_with_code_three(runner, tmp_path):
    """
    Tests that a prompt leaving the norm bound exits 3.
    """
    config_path = write_config(tmp_path, max_prompt_norm=1e-9)
    result = runner.invoke(cli, ["run", "--config", str(config_path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 3
    assert "exceeds the bound" in result.output


def test_output_directory_from_environment(runner, tmp_path):
    """
    Tests that PROMPTFOLIO_OUT sets the output directory.
    """
    config_path = write_config(tmp_path, n_test=0)
    out = tmp_path / "from_env"
    result = runner.invoke(cli, ["run", "--config", str(config_path)], env={"PROMPTFOLIO_OUT": str(out)})
    assert result.exit_code == 0, result.output
    assert any(path.name.startswith("report_") for path in out.iterdir())


def test_theta_sweep_resumes(runner, tmp_path):
    """
    Tests that a theta sweep writes its table and that a rerun reuses the registry.
    """
    config_path = write_config(tmp_path, theta_grid=[0.0, 1.0], sweep_seeds=[0])
    config_hash = RunConfig.from_file(config_path).config_hash()
    out = tmp_path / "out"
    args = ["sweep", "--config", str(config_path), "--axis", "theta", "--out", str(out)]
    first = runner.invoke(cli, args)
    assert first.exit_code == 0, first.output
    table = (out / artifact_name("sweep_theta", config_hash, "csv")).read_bytes()
    assert (out / "registry.sqlite").exists()
    assert "Empirical argmin theta" in first.output

    second = runner.invoke(cli, args)
    assert second.exit_code == 0, second.output
    assert (out / artifact_name("sweep_theta", config_hash, "csv")).read_bytes() == table


def test_registry_list_and_delete(runner, tmp_path):
    """
    Tests that the registry commands list the stored sweep points and that a deleted point is gone.
    """
    config_path = write_config(tmp_path, theta_grid=[0.0, 1.0], sweep_seeds=[0])
    out = tmp_path / "out"
    empty = runner.invoke(cli, ["registry", "list", "--out", str(out)])
    assert empty.exit_code == 0, empty.output
    assert "No registry" in empty.output

    runner.invoke(cli, ["sweep", "--config", str(config_path), "--axis", "theta", "--out", str(out)])
    listed = runner.invoke(cli, ["registry", "list", "--out", str(out), "--axis", "theta"])
    assert listed.exit_code == 0, listed.output
    assert "2 registered runs." in listed.output
    first_hash = listed.output.splitlines()[0].split()[0]

    deleted = runner.invoke(cli, ["registry", "delete", first_hash, "--out", str(out)])
    assert deleted.exit_code == 0, deleted.output
    assert "Deleted 1 registered runs." in deleted.output
    after = runner.invoke(cli, ["registry", "list", "--out", str(out)])
    assert "1 registered runs." in after.output
    assert first_hash not in after.output

    missing = runner.invoke(cli, ["registry", "delete", "ffffffffffff", "--out", str(out)])
    assert missing.exit_code == 2


def test_verify_writes_a_verdict(runner, tmp_path):
    """
    Tests that a passing suite exits 0 and writes its JSON verdict.
    """
    result = runner.invoke(cli, ["verify", "decomposition", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "[PASS]" in result.output
    verdict = json.loads((tmp_path / "verify_decomposition.json").read_text(encoding="utf-8"))
    assert verdict["verdict"] == "pass"
    assert verdict["first_failure"] is None


def test_verify_failure_exits_one(runner, tmp_path, monkeypatch):
    """
    Tests that a failing property exits 1 and is named in the verdict.
    """
    def failing_suite(name, seed=0):
        report = VerificationReport(name)
        report.add("always fails", False, "forced")
        return report

    monkeypatch.setattr("src.main.run_suite", failing_suite)
    result = runner.invoke(cli, ["verify", "gradients", "--out", str(tmp_path)])
    assert result.exit_code == 1
    assert "[FAIL] always fails" in result.output
    verdict = json.loads((tmp_path / "verify_gradients.json").read_text(encoding="utf-8"))
    assert verdict["first_failure"] == "always fails"


def test_theory_calculators(runner):
    """
    Tests the JSON output of the theory commands.
    """
    ratio = runner.invoke(cli, ["theory", "ratio", "--a", "1", "--b", "1", "--rho", "0", "--theta", "0.5"])
    assert ratio.exit_code == 0, ratio.output
    assert json.loads(ratio.stdout)["ratio"] == pytest.approx(math.sqrt(2.0))

    star = runner.invoke(cli, ["theory", "theta-star", "--a", "0.5", "--b", "1", "--rho", "-0.5"])
    assert star.exit_code == 0, star.output
    assert json.loads(star.stdout)["interior"] is True

    advantage = runner.invoke(cli, ["theory", "advantage", "--a", "2", "--b", "3", "--rho", "0"])
    payload = json.loads(advantage.stdout)
    assert (payload["Ca"], payload["Cb"], payload["Cc"]) == pytest.approx((10.0, 52.0, 32.0))

    order = runner.invoke(cli, ["theory", "order", "--K", "2", "--chi", "1", "--snr-g", "1", "--snr-k", "1"])
    assert json.loads(order.stdout)["theta_order"] == pytest.approx(1.0 / 9.0)

    error = runner.invoke(cli, ["theory", "error", "--mu", "2", "--sigma", "1"])
    assert json.loads(error.stdout)["error"] == pytest.approx(0.022750131948179)


def test_theory_input_errors(runner):
    """
    Tests that invalid or degenerate inputs exit 2.
    """
    invalid = runner.invoke(cli, ["theory", "ratio", "--a", "1", "--b", "0", "--rho", "0", "--theta", "0.5"])
    assert invalid.exit_code == 2
    assert "b must be > 0" in invalid.output
    degenerate = runner.invoke(cli, ["theory", "theta-star", "--a", "2", "--b", "1", "--rho", "1"])
    assert degenerate.exit_code == 2
