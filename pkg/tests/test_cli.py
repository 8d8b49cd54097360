"""Command-line surface: exit codes and machine-readable errors."""

import json

import pytest

from servopb.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli_run")
    for cmd in (["collect"], ["train-codec"], ["train"]):
        code = main(cmd + ["--out", str(run), "--seed", "3", "--quiet"])
        assert code == 0
    return run


class TestHappyPath:
    def test_collect_emits_summary_json(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "collect", "--out", str(tmp_path),
                               "--seed", "5", "--quiet")
        assert code == 0
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["stage"] == "collect"
        assert summary["episodes"] == 4

    def test_adapt_then_eval(self, capsys, pipeline_dir):
        code, out, _ = run_cli(capsys, "adapt", "--out", str(pipeline_dir),
                               "--seed", "3", "--state", "c1-j0",
                               "--episodes", "1", "--quiet")
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["state"] == "c1-j0"
        code, out, _ = run_cli(capsys, "eval", "--out", str(pipeline_dir),
                               "--seed", "3", "--states", "c1-j0",
                               "--objects", "L-25", "--trials", "1",
                               "--modes", "correct,baseline", "--quiet")
        assert code == 0
        assert (pipeline_dir / "eval" / "outcomes.csv").exists()

    def test_plotdata_tolerates_empty_run(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "plotdata", "--out", str(tmp_path),
                               "--quiet")
        assert code == 0
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["warnings"]


class TestFailurePaths:
    def test_eval_before_train_is_stage_error(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "eval", "--out", str(tmp_path),
                               "--quiet")
        assert code == 2
        payload = json.loads(err.strip())
        assert payload["error"] == "StageError"
        assert "hint" in payload or "missing" in payload

    def test_unknown_preset(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "collect", "--out", str(tmp_path),
                               "--preset", "galactic", "--quiet")
        assert code == 2
        assert json.loads(err.strip())["error"] == "StageError"

    def test_workers_must_be_positive(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "collect", "--out", str(tmp_path),
                               "--workers", "0", "--quiet")
        assert code == 2
        assert json.loads(err.strip())["error"]

    def test_bad_mode_rejected(self, capsys, pipeline_dir):
        code, _, err = run_cli(capsys, "eval", "--out", str(pipeline_dir),
                               "--seed", "3", "--modes", "psychic", "--quiet")
        assert code == 2
        payload = json.loads(err.strip())
        assert "psychic" in payload["message"]

    def test_seed_mismatch_with_existing_run(self, capsys, pipeline_dir):
        code, _, err = run_cli(capsys, "collect", "--out", str(pipeline_dir),
                               "--seed", "4", "--quiet")
        assert code == 2
        payload = json.loads(err.strip())
        assert payload["expected"] == 3
        assert payload["found"] == 4
