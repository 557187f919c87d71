"""Tests for the command-line surface and its exit codes."""

import json
import logging

import numpy as np
import pytest
from click.testing import CliRunner

from config.settings import TrainConfig
from main import cli, main
from src.dataio import FeatureDims, load_dataset
from src.network import Checkpoint, init_params, save_checkpoint


@pytest.fixture(autouse=True)
def restore_root_logging():
    """setup_logging replaces the root handlers; put the originals back."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth_file(tmp_path, capsys):
    path = tmp_path / "ul.jsonl"
    code, _, _ = run(
        capsys, "synth", "--task", "unimodal-linear", "--n", "30", "--seed", "4", "--out", str(path)
    )
    assert code == 0
    return path


@pytest.fixture
def zero_checkpoint(tmp_path):
    params = init_params(FeatureDims(d_t=8, d_a=4, d_v=4), 4, 2, zero=True)
    return save_checkpoint(Checkpoint(params, TrainConfig(hidden_size=4, topics_K=2)), tmp_path / "zero.json")


class TestSynth:
    def test_writes_dataset(self, tmp_path, capsys):
        """synth writes a loadable dataset and reports it on stdout."""
        path = tmp_path / "cp.jsonl"
        code, out, _ = run(capsys, "synth", "--task", "cross-modal-parity", "--n", "12", "--out", str(path))
        assert code == 0
        summary = json.loads(out)
        assert summary["n"] == 12
        assert summary["dims"] == {"d_t": 8, "d_a": 4, "d_v": 4}
        assert len(load_dataset(path)) == 12

    def test_unknown_task_is_usage_error(self, tmp_path, capsys):
        """An invalid choice exits 1."""
        code, out, _ = run(capsys, "synth", "--task", "poetry", "--out", str(tmp_path / "x.jsonl"))
        assert code == 1
        assert out == ""


class TestEvaluateCommand:
    def test_reports_json(self, synth_file, zero_checkpoint, capsys):
        """evaluate prints accuracy, F1 and the confusion matrix."""
        code, out, _ = run(
            capsys, "evaluate", "--checkpoint", str(zero_checkpoint), "--data", str(synth_file)
        )
        assert code == 0
        report = json.loads(out)
        assert report["n"] == 30
        assert report["label_target"] == "ee"
        assert report["accuracy"] == report["confusion"][0][0] / 30
        assert all(row[1] == row[2] == 0 for row in report["confusion"])

    def test_modalities_mismatch(self, synth_file, zero_checkpoint, capsys):
        """Asking for modalities the checkpoint does not consume exits 1."""
        code, out, _ = run(
            capsys,
            "evaluate",
            "--checkpoint",
            str(zero_checkpoint),
            "--data",
            str(synth_file),
            "--modalities",
            "text",
        )
        assert code == 1
        assert out == ""

    def test_width_mismatch_exits_2(self, tmp_path, synth_file, capsys):
        """A checkpoint built for other widths is a data error."""
        params = init_params(FeatureDims(d_t=5, d_a=4, d_v=4), 4, 2)
        ckpt = save_checkpoint(Checkpoint(params, TrainConfig()), tmp_path / "wide.json")
        code, _, err = run(capsys, "evaluate", "--checkpoint", str(ckpt), "--data", str(synth_file))
        assert code == 2
        assert "text" in err

    def test_malformed_data_exits_2(self, tmp_path, zero_checkpoint, capsys):
        """A dataset that fails schema validation exits 2."""
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"schema_version": 1, "dims": {"d_t": 8, "d_a": 4, "d_v": 4}}\n{"id": 7}\n')
        code, out, _ = run(capsys, "evaluate", "--checkpoint", str(zero_checkpoint), "--data", str(bad))
        assert code == 2
        assert out == ""


class TestLdaCommands:
    def test_fit_then_topics(self, tmp_path, capsys):
        """lda-fit saves a model whose topics lda-topics lists."""
        docs = tmp_path / "docs.txt"
        docs.write_text("calm listen calm\nfear anger fear\n\ncalm trust\n")
        model = tmp_path / "lda.json"
        code, out, _ = run(
            capsys, "lda-fit", "--docs", str(docs), "--topics", "2", "--sweeps", "5", "--out", str(model)
        )
        assert code == 0
        assert json.loads(out)["documents"] == 3
        assert json.loads(out)["vocabulary"] == 5

        code, out, _ = run(capsys, "lda-topics", "--model", str(model), "--top", "3")
        assert code == 0
        topics = json.loads(out)
        assert set(topics) == {"topic_0", "topic_1"}
        assert all(len(words) == 3 for words in topics.values())

    def test_zero_topics_exits_1(self, tmp_path, capsys):
        """K=0 violates the sampler's precondition."""
        docs = tmp_path / "docs.txt"
        docs.write_text("a b\n")
        out_path = str(tmp_path / "m.json")
        code, _, _ = run(capsys, "lda-fit", "--docs", str(docs), "--topics", "0", "--out", out_path)
        assert code == 1


class TestTrainCommand:
    def test_train_writes_checkpoints(self, tmp_path, synth_file, capsys):
        """train reports a summary and leaves best/last checkpoints."""
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"epochs": 2, "batch_size": 8, "hidden_size": 4, "topics_K": 2}))
        out_dir = tmp_path / "run"
        code, out, _ = run(
            capsys,
            "train",
            "--data",
            str(synth_file),
            "--config",
            str(config),
            "--no-sdat",
            "--out",
            str(out_dir),
        )
        assert code == 0
        summary = json.loads(out)
        assert summary["epochs"] == 2
        assert summary["test"]["n"] == 6
        assert (out_dir / "best.json").exists()
        assert (out_dir / "last.json").exists()

    def test_missing_documents_exits_1(self, tmp_path, synth_file, capsys):
        """SDAT on data without documents is a configuration error."""
        code, _, err = run(capsys, "train", "--data", str(synth_file), "--out", str(tmp_path / "run"))
        assert code == 1
        assert "supervisory documents" in err

    def test_invalid_config_exits_1(self, tmp_path, synth_file, capsys):
        """Unknown config keys are rejected."""
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"epochz": 2}))
        code, _, _ = run(capsys, "train", "--data", str(synth_file), "--config", str(config))
        assert code == 1


class TestGradcheckCommand:
    def test_passes(self, capsys):
        """The gradient gate passes and exits 0."""
        code, out, _ = run(capsys, "gradcheck", "--seed", "0")
        assert code == 0
        result = json.loads(out)
        assert result["passed"] is True
        assert result["max_relative_error"] < 1e-4
        assert len(result["per_parameter"]) == 20

    def test_failure_exits_3(self, capsys, monkeypatch):
        """A failing gate exits 3."""
        monkeypatch.setattr("main.gradient_check", lambda cfg, seed: {"w": np.float64(0.5)})
        code, out, _ = run(capsys, "gradcheck")
        assert code == 3
        assert json.loads(out)["passed"] is False


class TestHelp:
    def test_lists_commands(self):
        """The group help names every command."""
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("train", "evaluate", "lda-fit", "lda-topics", "synth", "gradcheck", "ablate"):
            assert command in result.output

    def test_unknown_command(self, capsys):
        """An unknown subcommand exits 1."""
        code, _, _ = run(capsys, "fly")
        assert code == 1
