"""Shared fixtures: the default vocabulary, a small generated dataset and a tiny model."""

from __future__ import annotations

import pytest

from diffscene.net.model import ModelConfig, init_params
from diffscene.scenegen.dataset import build_dataset, load_dataset
from diffscene.scenegen.scenes import SceneSpec
from diffscene.scenegen.tasks import Task
from diffscene.vocab.tokens import default_vocab

EQUAL_MIX = {t.value: 0.2 for t in Task}


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def scene_spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, scene_spec):
    out = tmp_path_factory.mktemp("data")
    build_dataset(scene_spec, 7, 40, EQUAL_MIX, out)
    return out


@pytest.fixture(scope="session")
def dataset(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture(scope="session")
def tiny_config(dataset):
    return ModelConfig(
        vocab_size=len(dataset.vocab),
        d=16,
        n_layers=1,
        n_heads=2,
        feature_dim=dataset.spec.feature_dim,
        n_patches=dataset.spec.n_patches,
        vocab_hash=dataset.vocab_hash,
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)
