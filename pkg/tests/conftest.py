"""
Shared fixtures and the --runslow switch.

Long-running checks (multi-minute training or benchmark runs) carry the
`slow` marker and only run with `pytest --runslow`.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "source"))

from fibo.funcprior import (  # noqa: E402
    Dataset,
    FeatureMap,
    FunctionSample,
    PriorHyperparams,
    TrainingPair,
)
from fibo.model import FiboModel, ModelConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cosine_sample():
    """f(x) = cos(2 pi x + pi) on [0,1]: one feature, maximum 1 at x = 0.5."""
    feature_map = FeatureMap(
        W=np.array([[2.0 * np.pi]]),
        b=np.array([np.pi]),
        signal_variance=0.5,
        lengthscales=np.array([1.0]),
    )
    return FunctionSample(feature_map, np.array([1.0]))


def random_dataset(rng: np.random.Generator, n: int, dim: int) -> Dataset:
    X = rng.uniform(0.0, 1.0, size=(n, dim))
    y = np.sin(3.0 * X).sum(axis=1) + 0.1 * rng.standard_normal(n)
    return Dataset(X, y)


def perturbed_model(dim: int, seed: int = 0, scale: float = 0.3, attention: bool = False) -> FiboModel:
    """A model whose flow is not the identity, so every weight affects the output."""
    model = FiboModel.initialize(ModelConfig.for_dimension(dim, attention=attention), seed)
    rng = np.random.default_rng(seed + 1)
    for name, value in model.weights.items():
        model.weights[name] = value + scale * rng.standard_normal(value.shape)
    return model


def toy_pairs(rng: np.random.Generator, count: int, dim: int, n_lo: int = 3, n_hi: int = 8) -> list[TrainingPair]:
    pairs = []
    for _ in range(count):
        D = random_dataset(rng, int(rng.integers(n_lo, n_hi + 1)), dim)
        pairs.append(TrainingPair(x_star=rng.uniform(0.05, 0.95, size=dim), dataset=D, y_star=float(D.y.max())))
    return pairs


@pytest.fixture
def small_prior():
    return PriorHyperparams(dim=1, num_features=64)
