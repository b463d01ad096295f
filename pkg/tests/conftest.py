"""Shared fixtures: a tiny model configuration and a small synthetic corpus."""

import pytest

from src.config import ModelConfig, RunConfig, TrainConfig
from src.synthdata import generate, vocabulary

TINY_MODEL = dict(
    embed_dim=8,
    heads=2,
    mlp_ratio=2,
    sub_layers=1,
    whole_layers=1,
    context_length=16,
    num_chunks=2,
    sub_captions=3,
    canvas=24,
    vision_width=8,
    superpixels=16,
    stage_sizes=(8, 4, 2),
    blocks_per_stage=1,
    superpixel_iterations=3,
    pool_heads=2,
)

TINY_TRAIN = dict(batch_size=4, epochs=2, warmup_steps=1, log_every=1)


@pytest.fixture(scope="session")
def vocab():
    return vocabulary()


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), **TINY_MODEL)


@pytest.fixture(scope="session")
def tiny_run(tiny_config):
    return RunConfig(model=tiny_config, train=TrainConfig(**TINY_TRAIN))


@pytest.fixture(scope="session")
def samples():
    return generate(seed=0, count=10, canvas=24)
