"""
Shared pytest fixtures: tiny model configs, a tiny synthetic dataset on disk and
a frozen tiny teacher. Long directional experiments are marked slow.
"""

import pytest

from tgr_moe.datasets import build_synthetic, generate_synthetic
from tgr_moe.models import LossWeights, ModelConfig, SyntheticSpec, TrainConfig
from tgr_moe.teacher import pretrain_teacher, save_teacher


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow directional experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(depth=2, hidden_dim=8, heads=2, ffn_dim=8, num_classes=3, tokens_per_sample=4,
                  input_dim=4, moe_layers=[1, 2], num_experts=2, top_k=1, noise_std=1.0)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_teacher_config(**overrides) -> ModelConfig:
    return tiny_model_config(moe_layers=[], **overrides)


def tiny_spec(**overrides) -> SyntheticSpec:
    values = dict(num_classes=3, num_components=6, token_dim=4, tokens_per_sample=4, noise_sigma=0.1,
                  samples_train=24, samples_val=12, seed=0)
    values.update(overrides)
    return SyntheticSpec(**values)


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def teacher_config():
    return tiny_teacher_config()


@pytest.fixture(scope="session")
def tiny_splits():
    splits, _ = build_synthetic(tiny_spec())
    return splits


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    generate_synthetic(tiny_spec(), path)
    return path


@pytest.fixture(scope="session")
def teacher_checkpoint(tmp_path_factory, tiny_splits):
    model, provenance = pretrain_teacher(tiny_teacher_config(), tiny_splits, epochs=2, seed=0, batch_size=8,
                                         warmup_epochs=1)
    return save_teacher(model, provenance, tmp_path_factory.mktemp("teacher") / "teacher")


@pytest.fixture
def make_config(data_dir, teacher_checkpoint):
    """Factory for tiny TrainConfigs; teacher variants get the session teacher."""
    def factory(variant: str = "vmoe", model: ModelConfig = None, weights: LossWeights = None, **overrides):
        if model is None:
            model = tiny_teacher_config() if variant == "dense" else tiny_model_config()
        values = dict(variant=variant, model=model, weights=weights or LossWeights(), epochs=2, batch_size=8,
                      warmup_epochs=1, log_every_steps=2, data_dir=str(data_dir), probe_set_size=6,
                      prefetch_depth=0)
        if variant not in ("dense", "vmoe", "vmoe_zloss"):
            values['teacher_checkpoint'] = str(teacher_checkpoint)
        values.update(overrides)
        return TrainConfig(**values)

    return factory
