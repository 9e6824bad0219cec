"""Tests for forward masking, the training losses and the staged trainer."""

from __future__ import annotations

import math

import numpy as np
import pytest

from diffscene.core.errors import (
    CompatibilityError,
    ConfigurationError,
    NumericError,
    RangeError,
    TrainingError,
    VocabularyError,
)
from diffscene.diffusion import trainer
from diffscene.diffusion.losses import (
    DegenerateLossWarning,
    LossReduction,
    causal_loss,
    masked_loss,
    masked_loss_and_grad,
)
from diffscene.diffusion.masking import forward_mask
from diffscene.diffusion.trainer import (
    Stage,
    TrainConfig,
    lr_at,
    read_training_log,
    train,
    trainable_mask,
    warmup_steps,
)
from diffscene.net.checkpoint import load_checkpoint
from diffscene.net.model import AttentionMode, ModelConfig, init_params, loss_and_grads
from diffscene.scenegen.tasks import longest_sequence


class TestForwardMask:
    def test_t_zero(self):
        seq = forward_mask([4, 5, 6], 0.0, np.random.default_rng(0))
        assert seq.n_masked == 0
        assert list(seq.ids) == [4, 5, 6]

    def test_t_one(self):
        seq = forward_mask([4, 5, 6], 1.0, np.random.default_rng(0))
        assert seq.mask_flags.all()
        assert set(seq.ids) == {1}

    def test_half_rate(self):
        rng = np.random.default_rng(42)
        fractions = [forward_mask(np.full(1000, 7), 0.5, rng).n_masked / 1000 for _ in range(200)]
        assert abs(np.mean(fractions) - 0.5) < 0.05
        assert all(abs(f - 0.5) < 0.08 for f in fractions)

    @pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
    def test_large_sample_fraction(self, t):
        seq = forward_mask(np.full(100_000, 7), t, np.random.default_rng(int(t * 10)))
        assert abs(seq.n_masked / 100_000 - t) < 0.01

    def test_t_out_of_range(self):
        with pytest.raises(RangeError):
            forward_mask([4], 1.5, np.random.default_rng(0))

    def test_target_with_mask_token(self):
        with pytest.raises(VocabularyError):
            forward_mask([4, 1], 0.3, np.random.default_rng(0))


class TestMaskedLoss:
    def test_no_masked_positions(self):
        assert masked_loss(np.zeros((3, 148)), [4, 5, 6], [False] * 3) == 0.0

    def test_uniform_logits(self):
        loss = masked_loss(np.zeros((2, 148)), [4, 5], [True, False])
        assert loss == pytest.approx(math.log(148))
        assert loss == pytest.approx(4.997, abs=1e-3)

    def test_two_positions_by_hand(self):
        logits = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 3.0]])
        ce0 = -math.log(math.exp(2) / (math.exp(2) + 2))
        ce1 = -math.log(math.exp(1) / (1 + math.exp(1) + math.exp(3)))
        loss = masked_loss(logits, [0, 1], [True, True])
        assert loss == pytest.approx((ce0 + ce1) / 2)
        assert masked_loss(logits, [0, 1], [True, True], LossReduction.SUM) == pytest.approx(ce0 + ce1)
        inv = masked_loss(logits, [0, 1], [True, True], LossReduction.INVERSE_T, t=0.5)
        assert inv == pytest.approx((ce0 + ce1) / (0.5 * 2))

    def test_unmasked_rows_get_no_gradient(self):
        _, grad = masked_loss_and_grad(np.ones((3, 5)), [0, 1, 2], [True, False, True])
        assert not grad[1].any()
        assert grad[0].sum() == pytest.approx(0.0)

    def test_target_out_of_range(self):
        with pytest.raises(VocabularyError):
            masked_loss(np.zeros((1, 5)), [9], [True])


class TestCausalLoss:
    def test_uniform_logits(self):
        assert causal_loss(np.zeros((4, 148)), [5, 6, 7, 0]) == pytest.approx(math.log(148))

    def test_all_pad_warns(self):
        with pytest.warns(DegenerateLossWarning):
            assert causal_loss(np.zeros((2, 10)), [0, 0]) == 0.0


class TestSchedule:
    def test_warmup_steps(self):
        assert warmup_steps(100, 0.03) == 3
        assert warmup_steps(10, 0.0) == 0

    def test_lr_shape(self):
        total, peak = 100, 1e-3
        assert lr_at(0, total, peak) == 0.0
        assert lr_at(3, total, peak) == pytest.approx(peak)
        assert lr_at(2, total, peak) < lr_at(3, total, peak)
        assert lr_at(50, total, peak) < peak
        assert lr_at(99, total, peak) < lr_at(50, total, peak)

    def test_no_warmup_starts_at_peak(self):
        assert lr_at(0, 10, 0.5, warmup_frac=0.0) == pytest.approx(0.5)


class TestTrainableMask:
    def test_align_projector_only(self, tiny_params):
        mask = trainable_mask(tiny_params, Stage.ALIGN)
        assert {n for n, on in mask.items() if on} == set(tiny_params.projector_names())

    def test_text_pretrain_excludes_projector(self, tiny_params):
        mask = trainable_mask(tiny_params, Stage.TEXT_PRETRAIN)
        assert not any(mask[n] for n in tiny_params.projector_names())
        assert mask["tok_emb"]

    def test_full_trains_all(self, tiny_params):
        assert all(trainable_mask(tiny_params, Stage.FULL).values())


class TestTrainConfig:
    def test_stage_defaults(self):
        assert TrainConfig(Stage.ALIGN).peak_lr == 1e-3
        assert TrainConfig(Stage.FULL).peak_lr == 1e-5

    def test_total_steps(self):
        assert TrainConfig(Stage.FULL, epochs=2, batch_size=8).total_steps(20) == 6
        assert TrainConfig(Stage.FULL, epochs=2, max_steps=5).total_steps(20) == 5

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(Stage.FULL, warmup_frac=1.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(Stage.FULL, batch_size=0)


class TestTrain:
    def test_align_freezes_trunk(self, tiny_params, dataset):
        config = TrainConfig(Stage.ALIGN, max_steps=1, batch_size=4, warmup_frac=0.0)
        result = train(config, dataset, tiny_params)
        projector = set(tiny_params.projector_names())
        for name in tiny_params:
            same = np.array_equal(result.params[name], tiny_params[name])
            assert same != (name in projector), name

    def test_log_and_checkpoints(self, tmp_path, tiny_params, dataset):
        config = TrainConfig(Stage.TEXT_PRETRAIN, max_steps=4, batch_size=4, checkpoint_every=2)
        log_path = tmp_path / "log.jsonl"
        result = train(config, dataset, tiny_params, log_path=log_path, checkpoint_dir=tmp_path)
        records = read_training_log(log_path)
        assert [r["step"] for r in records] == [0, 1, 2, 3]
        assert all(r["stage"] == "text_pretrain" for r in records)
        assert records[0]["lr"] == 0.0
        assert result.checkpoint == tmp_path / "text_pretrain.ckpt"
        assert (tmp_path / "text_pretrain-step000002.ckpt").exists()
        assert (tmp_path / "text_pretrain-step000004.ckpt").exists()
        for name in tiny_params.projector_names():
            assert np.array_equal(result.params[name], tiny_params[name])

    def test_deterministic(self, tiny_params, dataset):
        config = TrainConfig(Stage.FULL, max_steps=3, batch_size=4, lr=1e-3)
        a = train(config, dataset, tiny_params)
        b = train(config, dataset, tiny_params)
        assert a.losses == b.losses
        assert np.array_equal(a.params["tok_emb"], b.params["tok_emb"])

    def test_ar_baseline_switches_mode(self, tiny_params, dataset):
        result = train(TrainConfig(Stage.AR_BASELINE, max_steps=1, batch_size=4), dataset, tiny_params)
        assert result.params.config.attention_mode is AttentionMode.CAUSAL
        assert math.isfinite(result.losses[0])

    def test_loss_decreases(self, tiny_config, dataset):
        params = init_params(tiny_config, 1)
        caption = dataset.by_task("caption")
        config = TrainConfig(Stage.FULL, max_steps=40, batch_size=8, lr=3e-3, seed=2)
        losses = train(config, caption, params).losses
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_empty_dataset(self, tiny_params, dataset):
        with pytest.raises(ConfigurationError):
            train(TrainConfig(Stage.FULL, max_steps=1), dataset.subset([]), tiny_params)

    def test_vocab_mismatch(self, tiny_params, dataset):
        other = tiny_params.with_config(
            ModelConfig(**{**tiny_params.config.to_dict(), "vocab_hash": "0" * 64})
        )
        with pytest.raises(CompatibilityError):
            train(TrainConfig(Stage.FULL, max_steps=1), dataset, other)

    def test_detect_at_minimum_text_len(self, tiny_config, dataset):
        config = ModelConfig(**{**tiny_config.to_dict(), "max_text_len": longest_sequence()})
        detect = dataset.by_task("detect")
        result = train(TrainConfig(Stage.FULL, max_steps=1, batch_size=2), detect, init_params(config, 0))
        assert math.isfinite(result.losses[0])


class TestNonFiniteLoss:
    def test_nan_keeps_last_good(self, monkeypatch, tmp_path, tiny_params, dataset):
        seen = []

        def failing_third_step(params, batch, objective, mask=None):
            seen.append(params)
            if len(seen) == 3:
                raise NumericError("Non-finite loss", instance_index=1)
            return loss_and_grads(params, batch, objective, mask)

        monkeypatch.setattr(trainer, "loss_and_grads", failing_third_step)
        config = TrainConfig(Stage.FULL, max_steps=5, batch_size=4, lr=1e-3)
        with pytest.raises(TrainingError) as info:
            train(config, dataset, tiny_params, checkpoint_dir=tmp_path)
        path = info.value.last_good_checkpoint
        assert path == tmp_path / "full-last-good.ckpt"
        assert "step 2" in str(info.value)
        saved = load_checkpoint(path)
        for name in saved:
            assert np.array_equal(saved[name], seen[2][name]), name
        assert not np.array_equal(saved["tok_emb"], tiny_params["tok_emb"])

    def test_nan_parameters(self, tmp_path, tiny_params, dataset):
        bad = tiny_params.replace(**{"head.bias": np.full(tiny_params.config.vocab_size, np.nan, dtype=np.float32)})
        with pytest.raises(TrainingError) as info:
            train(TrainConfig(Stage.FULL, max_steps=2, batch_size=2), dataset, bad, checkpoint_dir=tmp_path)
        assert info.value.last_good_checkpoint.exists()
        assert isinstance(info.value.__cause__, NumericError)

    def test_no_checkpoint_dir(self, tiny_params, dataset):
        bad = tiny_params.replace(**{"head.bias": np.full(tiny_params.config.vocab_size, np.nan, dtype=np.float32)})
        with pytest.raises(TrainingError) as info:
            train(TrainConfig(Stage.FULL, max_steps=1, batch_size=2), dataset, bad)
        assert info.value.last_good_checkpoint is None
