"""Tests for metrics, the evaluation harness and ablation tables."""

from __future__ import annotations

import json

import numpy as np
import pytest

from diffscene.core.errors import CompatibilityError, ConfigurationError
from diffscene.decode.sampler import DecoderSettings, Paradigm, RemaskStrategy
from diffscene.eval.ablation import AblationKind, run_ablation
from diffscene.eval.harness import evaluate, evaluate_predictions
from diffscene.eval.metrics import (
    bleu4,
    detection_scores,
    grounding_acc,
    iou,
    parse_detection,
    token_accuracy,
)
from diffscene.net.model import ModelConfig, init_params
from diffscene.vocab.tokens import Box, encode_box


class TestIoU:
    def test_identical(self):
        b = Box(0.1, 0.1, 0.4, 0.4)
        assert iou(b, b) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou(Box(0, 0, 0.2, 0.2), Box(0.5, 0.5, 0.7, 0.7)) == 0.0

    def test_half_overlap(self):
        assert iou(Box(0, 0, 0.5, 0.5), Box(0.25, 0, 0.75, 0.5)) == pytest.approx(1 / 3)


class TestBleu:
    def test_identical(self):
        assert bleu4("a b c d e".split(), "a b c d e".split()) == pytest.approx(1.0)

    def test_empty(self):
        assert bleu4([], ["a"]) == 0.0

    def test_one_substitution(self):
        score = bleu4("a b c d e".split(), "a b c d f".split())
        expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
        assert score == pytest.approx(expected)
        assert score == pytest.approx(0.668, abs=1e-3)

    def test_no_unigram_match(self):
        assert bleu4(["x", "y"], ["a", "b"]) == 0.0

    def test_token_accuracy(self):
        assert token_accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75


def _span(vocab, class_index, box):
    return [vocab.class_id(class_index), *encode_box(vocab, box)]


class TestParseDetection:
    def test_two_objects(self, vocab):
        tokens = _span(vocab, 0, Box(0, 0, 0.2, 0.2)) + _span(vocab, 1, Box(0.5, 0.5, 0.9, 0.9))
        result = parse_detection(tokens + [0] * 22, vocab)
        assert len(result.predicted) == 2 and result.malformed_spans == 0
        assert result.predicted[1][0] == 1

    def test_all_pad(self, vocab):
        result = parse_detection([0] * 32, vocab)
        assert result.predicted == () and result.malformed_spans == 0

    def test_short_span(self, vocab):
        tokens = _span(vocab, 2, Box(0, 0, 0.2, 0.2))[:4] + [0] * 28
        result = parse_detection(tokens, vocab)
        assert result.predicted == () and result.malformed_spans == 1

    def test_resumes_at_next_class(self, vocab):
        junk = [vocab.lookup("red"), vocab.lookup("two")]
        tokens = junk + _span(vocab, 3, Box(0.1, 0.1, 0.3, 0.3)) + [0] * 25
        result = parse_detection(tokens, vocab)
        assert len(result.predicted) == 1 and result.malformed_spans == 1


class TestDetectionScores:
    TRUTH = [(0, Box(0, 0, 0.2, 0.2)), (1, Box(0.4, 0.4, 0.6, 0.6)), (2, Box(0.7, 0.7, 0.9, 0.9))]

    def test_exact(self):
        s = detection_scores(self.TRUTH, self.TRUTH)
        assert (s.precision, s.recall, s.set_f1_at_05, s.duplicate_rate) == (1.0, 1.0, 1.0, 0.0)

    def test_repeated_prediction(self):
        s = detection_scores([self.TRUTH[0]] * 3, self.TRUTH)
        assert s.precision == pytest.approx(1 / 3)
        assert s.recall == pytest.approx(1 / 3)
        assert s.duplicate_rate == pytest.approx(2 / 3)

    def test_empty_both(self):
        assert detection_scores([], []).set_f1_at_05 == 1.0

    def test_class_must_match(self):
        s = detection_scores([(4, self.TRUTH[0][1])], self.TRUTH)
        assert s.matches == 0


class TestGrounding:
    def test_exact(self, vocab):
        box = Box(0.3, 0.3, 0.4, 0.4)
        assert grounding_acc(encode_box(vocab, box) + [0] * 4, box, vocab) == 1

    def test_all_pad(self, vocab):
        assert grounding_acc([0] * 8, Box(0.3, 0.3, 0.4, 0.4), vocab) == 0

    def test_shifted_one_bin(self, vocab):
        truth = Box(0.305, 0.305, 0.405, 0.405)
        shifted = [vocab.coord_id(k) for k in (31, 31, 41, 41)]
        # 0.09^2 / (2 * 0.01 - 0.09^2) ~= 0.68
        assert grounding_acc(shifted, truth, vocab) == 1


class TestEvaluatePredictions:
    def test_oracle_scores_one(self, dataset):
        report = evaluate_predictions(dataset, [inst.target_ids for inst in dataset.instances])
        assert report.n_instances == len(dataset)
        assert report.tasks["caption"]["exact_match"] == 1.0
        assert report.tasks["caption"]["bleu4"] == pytest.approx(1.0)
        assert report.tasks["detect"]["set_f1_at_05"] == 1.0
        assert report.tasks["ground"]["acc_at_05"] == 1.0
        assert report.tasks["classify"]["accuracy"] == 1.0
        assert report.tasks["count"]["accuracy"] == 1.0

    def test_empty_split(self, dataset):
        report = evaluate_predictions(dataset.subset([]), [])
        assert report.n_instances == 0 and report.tasks == {}

    def test_order_invariant(self, dataset):
        preds = [inst.target_ids[::-1] for inst in dataset.instances]
        order = list(reversed(range(len(dataset))))
        a = evaluate_predictions(dataset, preds)
        b = evaluate_predictions(dataset.subset(order), [preds[i] for i in order])
        assert a.to_dict() == b.to_dict()


class TestEvaluate:
    def test_report_in_range(self, tmp_path, tiny_params, dataset):
        report = evaluate(tiny_params, dataset, DecoderSettings(steps=4))
        assert report.values_in_range()
        assert sum(report.counts.values()) == len(dataset)
        assert report.settings["effective_steps"]["ground"] == 4
        json_path, csv_path = report.write(tmp_path)
        assert json.loads(json_path.read_text(encoding="utf-8"))["n_instances"] == len(dataset)
        assert csv_path.read_text(encoding="utf-8").startswith("task,metric,value,n")

    def test_steps_clamped_to_length(self, tiny_params, dataset):
        report = evaluate(tiny_params, dataset.by_task("classify"), DecoderSettings(steps=16))
        assert report.settings["effective_steps"] == {"classify": 8}

    def test_random_strategy_order_invariant(self, tiny_params, dataset):
        subset = dataset.subset(range(10))
        settings = DecoderSettings(steps=4, strategy=RemaskStrategy.random(), seed=3)
        a = evaluate(tiny_params, subset, settings)
        b = evaluate(tiny_params, subset.subset(list(reversed(range(10)))), settings)
        assert a.to_dict() == b.to_dict()

    def test_ar_paradigm(self, tiny_params, dataset):
        report = evaluate(tiny_params, dataset.subset(range(5)), DecoderSettings(paradigm=Paradigm.AR))
        assert report.values_in_range()
        assert "effective_steps" not in report.settings

    def test_vocab_mismatch(self, dataset):
        config = ModelConfig(vocab_size=len(dataset.vocab), d=16, n_layers=1, n_heads=2, vocab_hash="f" * 64)
        with pytest.raises(CompatibilityError):
            evaluate(init_params(config, 0), dataset)


class TestAblation:
    def test_timesteps(self, tiny_params, dataset):
        result = run_ablation(AblationKind.TIMESTEPS, tiny_params, dataset.subset(range(6)), grid=(1, 2))
        assert list(result.table["steps"]) == [1, 2]

    def test_remask_strategy(self, tmp_path, tiny_params, dataset):
        result = run_ablation("remask_strategy", tiny_params, dataset.subset(range(6)), steps=2, seeds=2)
        assert list(result.table["strategy"]) == ["low_confidence", "random"]
        path = result.write(tmp_path)
        assert path.name == "ablation_remask_strategy.csv"
        assert "strategy" in result.to_text()

    def test_paradigm_needs_both(self, tiny_params, dataset):
        with pytest.raises(ConfigurationError):
            run_ablation(AblationKind.PARADIGM, tiny_params, dataset)

    def test_paradigm(self, tiny_params, dataset):
        models = {"diffusion": tiny_params, "ar": tiny_params}
        result = run_ablation(AblationKind.PARADIGM, models, dataset, min_objects=0)
        assert list(result.table["paradigm"]) == ["diffusion", "ar"]
        assert result.table["n"].iloc[0] == len(dataset.by_task("detect"))

    def test_finalization_shares(self, tiny_params, dataset):
        result = run_ablation(AblationKind.FINALIZATION, tiny_params, dataset.subset(range(8)), steps=4)
        shares = result.table[["share_early", "share_middle", "share_late"]].sum(axis=1)
        assert np.allclose(shares, 1.0)
        assert result.table["mean_phase"].between(0, 2).all()
