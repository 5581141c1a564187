import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from medlm import model as M


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return M.ModelConfig(vocab_size=13, d_model=16, n_layers=2, n_heads=2,
                         max_seq_len=24)


@pytest.fixture
def tiny_params(tiny_config):
    return M.init_params(tiny_config, np.random.default_rng(42))
