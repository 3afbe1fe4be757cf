import numpy as np
import pytest
from hypothesis import settings

from amphista.drafter import Drafter, DrafterConfig
from amphista.model import ModelConfig, TargetModel

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=40)
settings.load_profile("ci")


TINY_MODEL = ModelConfig(
    vocab_size=24, hidden_dim=16, n_layers=2, n_heads=2, ffn_dim=32, max_seq_len=128
)


def make_tiny_model(seed: int = 0, config: ModelConfig = TINY_MODEL) -> TargetModel:
    return TargetModel(config, np.random.default_rng(seed))


def make_tiny_drafter(model: TargetModel, seed: int = 1, **cfg_kwargs) -> Drafter:
    cfg_kwargs.setdefault("sal_heads", 2)
    config = DrafterConfig(**cfg_kwargs)
    return Drafter(config, model, np.random.default_rng(seed))


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def tiny_drafter(tiny_model):
    return make_tiny_drafter(tiny_model)
