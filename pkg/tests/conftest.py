import numpy as np
import pytest
import torch

from clva.models import ModelConfig, init_model
from clva.toy import generate_toy_corpus
from clva.training import TrainConfig, fit


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(channels=16, style_dim=16, attention_bottleneck=8, vocab_size=128, disc_stages=1)
    base.update(overrides)
    return ModelConfig(**base)


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(channels=64, style_dim=64, attention_bottleneck=32, vocab_size=512, disc_stages=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_toy_corpus(n_styles=32, n_contents=16, size=(64, 64), seed=1)


@pytest.fixture(scope="session")
def micro_corpus():
    # 32x32 corpus for fast training-loop tests
    return generate_toy_corpus(n_styles=6, n_contents=4, size=(32, 32), seed=3)


def micro_train_config(**overrides) -> TrainConfig:
    base = dict(
        model=tiny_model_config(),
        batch_size=2,
        patches_per_image=2,
        lva_steps_per_epoch=3,
        cr_steps_per_epoch=2,
        epochs=1,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, micro_corpus):
    """A very short but real training run; provides a usable checkpoint."""
    contents, styles = micro_corpus
    run_dir = tmp_path_factory.mktemp("run")
    config = micro_train_config(epochs=1)
    model, paths = fit(contents, styles, config, run_dir)
    return {"model": model, "paths": paths, "run_dir": run_dir, "config": config}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
