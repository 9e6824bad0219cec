"""Directional trends of the ablations on a briefly trained model.

These train for a few minutes and are deselected by default; run them with
``pytest -m slow``. The gating thresholds of the desk-scale recipe are larger
and are checked with ``diffscene ablate`` (see docs/guide/evaluation.md).
"""

from __future__ import annotations

import numpy as np
import pytest

from diffscene.diffusion.losses import LossReduction
from diffscene.diffusion.trainer import Stage, TrainConfig, train
from diffscene.eval.ablation import AblationKind, run_ablation
from diffscene.net.model import ModelConfig, init_params
from diffscene.scenegen.dataset import build_dataset, load_dataset
from diffscene.scenegen.scenes import SceneSpec
from diffscene.scenegen.tasks import Task

pytestmark = pytest.mark.slow

STEPS = 400
F1 = "detect.set_f1_at_05"


@pytest.fixture(scope="module")
def trend_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend-data")
    build_dataset(SceneSpec(), 11, 600, {t.value: 0.2 for t in Task}, out)
    return load_dataset(out)


def _fresh(dataset):
    config = ModelConfig(
        vocab_size=len(dataset.vocab),
        d=32,
        n_layers=2,
        n_heads=4,
        feature_dim=dataset.spec.feature_dim,
        n_patches=dataset.spec.n_patches,
        vocab_hash=dataset.vocab_hash,
    )
    return init_params(config, seed=0)


def _fit(dataset, reduction=LossReduction.MEAN):
    config = TrainConfig(Stage.FULL, max_steps=STEPS, batch_size=16, lr=3e-3, reduction=reduction)
    return train(config, dataset, _fresh(dataset))


@pytest.fixture(scope="module")
def trained(trend_data):
    return _fit(trend_data.subset(range(500))).params


@pytest.fixture(scope="module")
def held_out(trend_data):
    return trend_data.subset(range(500, 600))


class TestLossReduction:
    @pytest.mark.parametrize("reduction", list(LossReduction))
    def test_loss_falls(self, trend_data, reduction):
        losses = np.array(_fit(trend_data, reduction).losses)
        tenth = len(losses) // 10
        assert np.median(losses[-tenth:]) < np.median(losses[:tenth])


class TestTimestepSweep:
    def test_more_steps_not_worse(self, trained, held_out):
        table = run_ablation(AblationKind.TIMESTEPS, trained, held_out).table.set_index("steps")
        assert list(table.index) == [1, 2, 4, 8, 16]
        assert table.loc[8, F1] >= table.loc[1, F1] - 0.02
        assert abs(table.loc[16, F1] - table.loc[8, F1]) <= 0.1


class TestRemaskStrategy:
    def test_low_confidence_not_worse(self, trained, held_out):
        table = run_ablation(AblationKind.REMASK_STRATEGY, trained, held_out, steps=8, seeds=3).table
        low, rand = table.set_index("strategy").loc[["low_confidence", "random"], F1]
        assert low >= rand - 0.05
