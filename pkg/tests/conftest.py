import numpy as np
import pytest
import torch

from unicl import pipeline as P
from unicl.config import build_config

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_run():
    """An 80/20-scene dataset with fitted tokenizers, shared across tests."""
    rc = build_config({"num_train": "80", "num_val": "20", "seed": "3"})
    data, tk = P.prepare(rc)
    return rc, data, tk


@pytest.fixture(scope="session")
def corpus_run():
    """The default-size dataset; used where statistics or coverage matter."""
    rc = build_config({})
    data, tk = P.prepare(rc)
    return rc, data, tk


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
