import numpy as np
import pytest

from crossrec.encoders import ItemEncoderConfig, ItemFeatures, TwoTowerModel, UserEncoderConfig
from crossrec.events import GeneratorConfig, generate_synthetic

TINY_GEN = GeneratorConfig(n_users=24, n_items=120, n_topics=6, vocab_size=400, visual_dim=5,
                           words_per_topic=10, events_per_user=(40, 70))
TINY_ITEM = ItemEncoderConfig(vocab_size=400, d=8, layers=1, heads=2, ffn_mult=2, max_tokens=6, visual_dim=5)
TINY_USER = UserEncoderConfig(d=8, layers=1, heads=2, ffn_mult=2, last_n=16, window=3, queries_per_scenario=1)


@pytest.fixture(scope="session")
def tiny_world():
    catalog, users = generate_synthetic(TINY_GEN, 0)
    return catalog, users, ItemFeatures.from_catalog(catalog, TINY_ITEM)


@pytest.fixture
def tiny_model():
    return TwoTowerModel(TINY_ITEM, TINY_USER, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
