import json

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from manifold_gan_compression.cli import cli
from manifold_gan_compression.core.run_manager import STAGES

from conftest import smoke_raw

PIPELINE = ["gen-data", "pretrain", "train-encoder", "build-index", "prune", "finalize", "finetune", "eval",
            "ablate", "report"]


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump(smoke_raw()))
    return path


def _error(result) -> dict:
    line = next(line for line in result.output.splitlines() if line.startswith('{"error"'))
    return json.loads(line)


def _invoke(runner, stage, run_dir, *args):
    return runner.invoke(cli, [stage, "--run-dir", str(run_dir), *args])


def test_gen_data_writes_run_config(tmp_path, config_file):
    run_dir = tmp_path / "run"
    result = _invoke(CliRunner(), "gen-data", run_dir, "--config", str(config_file), "--set", "lambda1=4.0")
    assert result.exit_code == 0, result.output
    snapshot = yaml.safe_load((run_dir / "config.yaml").read_text())
    assert snapshot["pruning"]["lambda1"] == 4.0
    stage_snapshot = yaml.safe_load((run_dir / "gen-data" / "config.yaml").read_text())
    assert stage_snapshot == snapshot
    assert (run_dir / "stages.json").exists()
    assert not (run_dir / ".lock").exists()


def test_later_stages_reuse_run_config(tmp_path, config_file):
    runner = CliRunner()
    run_dir = tmp_path / "run"
    _invoke(runner, "gen-data", run_dir, "--config", str(config_file), "--seed", "7")
    result = _invoke(runner, "gen-data", run_dir)
    assert result.exit_code == 0, result.output
    assert yaml.safe_load((run_dir / "gen-data.v2" / "config.yaml").read_text())["seed"] == 7


def test_stage_before_prerequisite(tmp_path, config_file):
    runner = CliRunner()
    run_dir = tmp_path / "run"
    assert _invoke(runner, "gen-data", run_dir, "--config", str(config_file)).exit_code == 0
    result = _invoke(runner, "prune", run_dir)
    assert result.exit_code == 1
    payload = _error(result)
    assert payload["error"] == "MissingArtifactError"
    assert payload["details"]["prerequisite"] == "pretrain"
    assert not (run_dir / "prune").exists()


def test_unknown_override_key(tmp_path, config_file):
    result = _invoke(CliRunner(), "gen-data", tmp_path / "run", "--config", str(config_file), "--set", "nonsense=1")
    assert result.exit_code == 2
    assert _error(result)["error"] == "ConfigurationError"


def test_missing_seed(tmp_path):
    result = _invoke(CliRunner(), "gen-data", tmp_path / "run")
    assert result.exit_code == 2


def test_report_names_missing_inputs(tmp_path, config_file):
    runner = CliRunner()
    run_dir = tmp_path / "run"
    _invoke(runner, "gen-data", run_dir, "--config", str(config_file))
    result = _invoke(runner, "report", run_dir)
    assert result.exit_code == 1
    assert _error(result)["details"]["missing"] == ["prune/history.csv", "finalize/report.json"]


def test_status(tmp_path, config_file):
    runner = CliRunner()
    run_dir = tmp_path / "run"
    _invoke(runner, "gen-data", run_dir, "--config", str(config_file))
    result = runner.invoke(cli, ["status", "--run-dir", str(run_dir)])
    assert result.exit_code == 0
    lines = result.output.splitlines()
    assert len(lines) == len(STAGES)
    assert "gen-data" in lines[0] and "1 run(s)" in lines[0]
    assert lines[1].split() == ["pretrain", "-"]


def test_shared_data_root_is_reused(tmp_path, config_file):
    runner = CliRunner()
    root = tmp_path / "datasets"
    for name in ("a", "b"):
        result = _invoke(runner, "gen-data", tmp_path / name, "--config", str(config_file), "--data-root", str(root))
        assert result.exit_code == 0, result.output
    assert len(list(root.iterdir())) == 1


@pytest.mark.slow
def test_full_pipeline(tmp_path, config_file):
    runner = CliRunner()
    run_dir = tmp_path / "run"
    for stage in PIPELINE:
        args = ["--config", str(config_file)] if stage == "gen-data" else []
        result = _invoke(runner, stage, run_dir, *args)
        assert result.exit_code == 0, f"{stage}: {result.output}"

    metrics = json.loads((run_dir / "eval" / "metrics.json").read_text())
    assert set(metrics["generators"]) == {"original", "pruned", "finetuned"}
    assert 0.0 <= metrics["neighborhood_overlap"] <= 1.0

    ablation = pd.read_csv(run_dir / "ablate" / "ablation.csv")
    assert len(ablation) == 6

    manifest = json.loads((run_dir / "report" / "manifest.json").read_text())
    assert manifest["absent"] == []
    assert {"loss_curves.html", "compression.csv", "ablation.csv", "neighborhoods.csv",
            "summary.md"} <= set(manifest["files"])
