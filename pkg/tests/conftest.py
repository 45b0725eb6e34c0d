import numpy as np
import pytest

from phrasetts.bench import punctuation_crf
from phrasetts.cli import synthetic_reference_mel
from phrasetts.frontend import default_inventory, default_lexicon
from phrasetts.model import ModelConfig, init_model_weights


@pytest.fixture(scope="session")
def lexicon():
    return default_lexicon()


@pytest.fixture(scope="session")
def inventory():
    return default_inventory()


@pytest.fixture(scope="session")
def small_weights(inventory):
    return init_model_weights(ModelConfig.small(len(inventory)), seed=7)


@pytest.fixture(scope="session")
def tiny_weights(inventory):
    """Narrowest decoder that still honours the embedding contract; for fast decode tests."""
    cfg = ModelConfig(len(inventory), prenet_dim=32, attention_rnn_dim=64, decoder_rnn_dim=64,
                      attention_dim=32, location_filters=8, location_kernel=7, postnet_channels=32)
    return init_model_weights(cfg, seed=11)


@pytest.fixture(scope="session")
def reference_mel():
    return synthetic_reference_mel(0, frames=48)


@pytest.fixture(scope="session")
def punct_crf():
    return punctuation_crf()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
