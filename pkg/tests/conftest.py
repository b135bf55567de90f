# tests/conftest.py
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from circuitlab.core.monitoring import monitoring  # noqa: E402
from circuitlab.models.transformer import init_model  # noqa: E402
from circuitlab.schemas.config import ModelConfig  # noqa: E402
from circuitlab.services.dataset_service import generate_pairs  # noqa: E402
from circuitlab.services.tokenizer_service import get_tokenizer  # noqa: E402


@pytest.fixture(autouse=True)
def reset_monitoring():
    monitoring.reset()
    yield


@pytest.fixture(scope="session")
def tokenizer():
    return get_tokenizer()


@pytest.fixture(scope="session")
def tiny_config(tokenizer):
    """2 layers x 2 heads, small enough for exhaustive checks"""
    return ModelConfig(
        n_layers=2, n_heads=2, d_model=8, d_mlp=16, vocab_size=len(tokenizer), init_std=0.3, seed=0
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_model(tiny_config)


@pytest.fixture(scope="session")
def linear_params(tiny_config):
    """Linear surrogate: fixed uniform attention, no norms, no GELU"""
    return init_model(tiny_config.model_copy(update={"linear": True}))


@pytest.fixture(scope="session")
def pair_sets():
    return {e: generate_pairs(1, 4, e, seed=0) for e in ("result", "answer", "both")}


@pytest.fixture(scope="session")
def result_pairs(pair_sets):
    return pair_sets["result"]


@pytest.fixture
def tokens(result_pairs):
    return np.array([p.clean_tokens for p in result_pairs[:2]])
