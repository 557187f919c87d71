"""Tests for dataset evaluation and the ablation suites."""

from types import SimpleNamespace

import numpy as np
import pytest

from config.settings import LossWeights, SynthConfig, TrainConfig
from src.dataio import FeatureDims, split, synth_generate
from src.errors import ConfigurationError, DimensionError, PreconditionError
from src.evaluation import (
    AblationRow,
    AblationTable,
    ablation_variants,
    evaluate,
    modality_label,
    run_ablation,
)
from src.network import Checkpoint, init_params, params_from_config
from src.training import prepare_targets, train


@pytest.fixture
def zero_model(unimodal_data):
    return init_params(unimodal_data.dims, hidden_size=4, topics_K=2, zero=True)


class TestEvaluate:
    """Scoring a model on a dataset."""

    def test_zero_model_predicts_lowest_class(self, zero_model, unimodal_data):
        """Uniform outputs tie, so every prediction is class 0."""
        report = evaluate(zero_model, unimodal_data)
        counts = report.confusion.counts
        assert counts[:, 1:].sum() == 0
        expected = sum(1 for s in unimodal_data if s.labels.ee == 0) / len(unimodal_data)
        assert report.accuracy == expected

    def test_accuracy_is_trace_over_n(self, small_params, tiny_dataset):
        """accuracy == trace(confusion) / n exactly."""
        for target in ("ee", "er", "cr"):
            report = evaluate(small_params, tiny_dataset, target)
            assert report.n == len(tiny_dataset)
            assert report.accuracy == np.trace(report.confusion.counts) / report.n
            assert 0.0 <= report.weighted_f1 <= 1.0

    def test_deterministic(self, small_params, tiny_dataset):
        """Two evaluations give identical reports."""
        first = evaluate(small_params, tiny_dataset).to_dict()
        assert evaluate(small_params, tiny_dataset).to_dict() == first

    def test_accepts_checkpoint(self, zero_model, unimodal_data):
        """A Checkpoint is scored through its parameters."""
        direct = evaluate(zero_model, unimodal_data)
        wrapped = evaluate(Checkpoint(zero_model, TrainConfig()), unimodal_data)
        assert wrapped.to_dict() == direct.to_dict()

    def test_width_mismatch_names_field(self, small_params, unimodal_data):
        """A model built for other widths is rejected at the evaluate stage."""
        with pytest.raises(DimensionError) as excinfo:
            evaluate(small_params, unimodal_data)
        assert excinfo.value.stage == "evaluate"
        assert "text" in str(excinfo.value)

    def test_unused_modalities_are_not_compared(self, unimodal_data):
        """A text-only model only needs the text width to agree."""
        params = init_params(FeatureDims(d_t=8, d_a=1, d_v=1), 4, 2, modalities=("text",))
        assert evaluate(params, unimodal_data).n == len(unimodal_data)

    def test_empty_dataset(self, zero_model, unimodal_data):
        """Nothing to score is an error."""
        with pytest.raises(PreconditionError):
            evaluate(zero_model, unimodal_data.subset([]))


class TestAblationVariants:
    """Suite definitions."""

    def test_modality_suite(self):
        """Seven variants: three unimodal, three bimodal, one trimodal."""
        variants = ablation_variants("modality", TrainConfig())
        assert [name for name, _ in variants] == ["T", "A", "V", "T+A", "T+V", "A+V", "T+A+V"]
        assert variants[-1][1].modalities == ("text", "audio", "video")
        assert variants[5][1].modalities == ("audio", "video")

    def test_sdat_suite(self):
        """Without SDAT sets w_t=0 and disables targets; with SDAT uses 0.16."""
        (off_name, off), (on_name, on) = ablation_variants("sdat", TrainConfig())
        assert (off_name, off.weights.w_t, off.sdat_enabled) == ("without SDAT", 0.0, False)
        assert (on_name, on.weights.w_t, on.sdat_enabled) == ("with SDAT", 0.16, True)
        assert off.weights.w_s == on.weights.w_s == 0.84

    def test_unknown_suite(self):
        """Only the modality and sdat suites exist."""
        with pytest.raises(ConfigurationError):
            ablation_variants("lexical", TrainConfig())

    def test_modality_label(self):
        assert modality_label(("audio", "video")) == "A+V"


class TestRunAblation:
    """Training and scoring every variant."""

    def test_modality_table(self, tiny_dataset, fast_config):
        """The modality suite yields one scored row per variant."""
        cfg = fast_config.model_copy(update={"epochs": 1})
        table = run_ablation("modality", cfg, tiny_dataset, tiny_dataset)
        assert len(table) == 7
        for row in table.rows:
            assert 0.0 <= row.accuracy <= 1.0
            assert 0.0 <= row.weighted_f1 <= 1.0
        assert table.row("T+A").settings["modalities"] == ["text", "audio"]
        text = table.to_text()
        assert "Variant" in text and "Acc." in text and "F1" in text
        assert len(text.splitlines()) == 3 + 7
        assert [r["variant"] for r in table.to_dict()["rows"]][-1] == "T+A+V"

    def test_sdat_targets_prepared_once(self, tiny_dataset, fast_config, mocker):
        """Targets are built once and withheld from the variant without SDAT."""
        targets = {"d00": object()}
        received = []
        params = init_params(tiny_dataset.dims, 4, 2, zero=True)

        def fake_train(train_ds, val_ds, cfg, targets=None):
            received.append((cfg.weights.w_t, targets))
            return SimpleNamespace(best_params=lambda: params, best_epoch=1)

        prepare = mocker.patch("src.evaluation.prepare_targets", return_value=targets)
        mocker.patch("src.evaluation.train", side_effect=fake_train)
        table = run_ablation("sdat", fast_config, tiny_dataset, tiny_dataset)
        assert prepare.call_count == 1
        assert received == [(0.0, {}), (0.16, targets)]
        assert [r.variant for r in table.rows] == ["without SDAT", "with SDAT"]

    def test_sdat_rows_end_to_end(self, topic_data, fast_config):
        """Each row scores the model a direct run with its loss weighting produces."""
        train_ds, val_ds, test_ds = split(topic_data)
        table = run_ablation("sdat", fast_config, train_ds, val_ds, test_ds)
        assert [(r.variant, r.settings["w_t"]) for r in table.rows] == [
            ("without SDAT", 0.0),
            ("with SDAT", 0.16),
        ]

        targets = prepare_targets(train_ds, fast_config)
        initial = params_from_config(train_ds.dims, fast_config).state_dict()
        for row, (_, cfg) in zip(table.rows, ablation_variants("sdat", fast_config)):
            run = train(train_ds, val_ds, cfg, targets=targets if cfg.sdat_enabled else {})
            report = evaluate(run.best_params(), test_ds)
            assert (row.accuracy, row.weighted_f1, row.best_epoch) == (
                report.accuracy,
                report.weighted_f1,
                run.best_epoch,
            )
            topic_head = run.params.state_dict()["heads.dis.W"]
            # The topic head only receives gradient through the KL term.
            assert np.array_equal(topic_head, initial["heads.dis.W"]) == (cfg.weights.w_t == 0.0)

    def test_needs_scoring_data(self, tiny_dataset, fast_config):
        """Without validation or test data there is nothing to score."""
        with pytest.raises(PreconditionError):
            run_ablation("sdat", fast_config, tiny_dataset, None)

    def test_text_layout(self):
        """Variant names left-aligned, numbers right-aligned to three decimals."""
        table = AblationTable(
            "sdat", "ee", [AblationRow("without SDAT", 0.5, 0.25, 1), AblationRow("with SDAT", 1.0, 1.0, 2)]
        )
        lines = table.to_text().splitlines()
        assert lines[0] == "sdat ablation (ee)"
        assert lines[3].startswith("without SDAT")
        assert lines[3].endswith("0.500  0.250")
        assert lines[4].endswith("1.000  1.000")


@pytest.mark.slow
class TestFusionNecessity:
    """Cross-modal parity needs both audio and video."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_trimodal_beats_text_only(self, seed):
        """Trimodal test accuracy >= 0.95 while text-only stays <= 0.60."""
        data = synth_generate(SynthConfig(task="cross-modal-parity", n=1200), seed=seed)
        train_ds, test_ds = data.subset(range(1000)), data.subset(range(1000, 1200))
        base = TrainConfig(
            epochs=100, seed=seed, sdat_enabled=False, weights=LossWeights(w_s=0.84, w_t=0.0)
        )
        trimodal = train(train_ds, None, base)
        text_only = train(train_ds, None, base.model_copy(update={"modalities": ("text",)}))
        assert evaluate(trimodal.params, test_ds).accuracy >= 0.95
        assert evaluate(text_only.params, test_ds).accuracy <= 0.60
