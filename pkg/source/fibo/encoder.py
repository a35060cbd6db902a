"""
Permutation-invariant dataset encoder (embed, mean-pool, project).

Each point (x, y) is embedded together with the dataset's y statistics,
the embeddings are averaged per dataset and projected to a context vector.
An optional single-head self-attention block runs before pooling.
"""

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from . import diffcore as dc
from .config import (
    CONTEXT_DIM_HIGH_DIM,
    CONTEXT_DIM_LOW_DIM,
    ENCODER_HIDDEN,
    ENCODER_WIDTH,
    Y_STD_FLOOR,
    DomainError,
    ShapeError,
)
from .funcprior import Dataset


Weights = Mapping[str, Union[np.ndarray, dc.Tensor]]


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    context_dim: int
    hidden: int = ENCODER_HIDDEN
    width: int = ENCODER_WIDTH
    attention: bool = False

    @property
    def input_dim(self) -> int:
        # x, standardized y, asinh(mean y), log(std y)
        return self.dim + 3

    @classmethod
    def for_dimension(cls, dim: int, attention: bool = False) -> "EncoderConfig":
        context_dim = CONTEXT_DIM_LOW_DIM if dim <= 2 else CONTEXT_DIM_HIGH_DIM
        return cls(dim=dim, context_dim=context_dim, attention=attention)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


@dataclass
class EncoderParams:
    """Encoder configuration plus its weight arrays keyed by name."""
    config: EncoderConfig
    weights: dict[str, np.ndarray]


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases."""
    def dense(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

    weights = {
        "W1": dense(config.input_dim, config.hidden),
        "b1": np.zeros(config.hidden),
        "W2": dense(config.hidden, config.width),
        "b2": np.zeros(config.width),
        "Wo": dense(config.width, config.context_dim),
        "bo": np.zeros(config.context_dim),
    }
    if config.attention:
        weights["Wq"] = dense(config.width, config.width)
        weights["Wk"] = dense(config.width, config.width)
        weights["Wv"] = dense(config.width, config.width)
    return weights


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def point_features(D: Dataset) -> np.ndarray:
    """
    Per-point input rows [x, (y - mean)/std, asinh(mean), log(std)].

    Rows are sorted lexicographically by (x, y) so the pooled sum has a
    fixed order for any permutation of D. std is the population std,
    floored at Y_STD_FLOOR.

    Raises:
        DomainError: empty D or x outside [0,1]^d
    """
    if len(D) == 0:
        raise DomainError("encode: dataset is empty")
    if np.any(D.X < 0.0) or np.any(D.X > 1.0):
        raise DomainError("encode: dataset points must lie in the unit cube")
    mean = float(np.mean(D.y))
    std = max(float(np.std(D.y)), Y_STD_FLOOR)
    z = (D.y - mean) / std
    rows = np.column_stack([D.X, z, np.full(len(D), math.asinh(mean)), np.full(len(D), math.log(std))])
    keys = tuple(rows[:, i] for i in reversed(range(D.dim + 1)))
    return rows[np.lexsort(keys)]


def _pooling(sizes: Sequence[int]) -> np.ndarray:
    """(B, N_total) matrix averaging each dataset's block of rows."""
    total = int(sum(sizes))
    pool = np.zeros((len(sizes), total))
    start = 0
    for row, n in enumerate(sizes):
        pool[row, start:start + n] = 1.0 / n
        start += n
    return pool


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def encode_batch(config: EncoderConfig, weights: Weights, datasets: Sequence[Dataset]) -> dc.Tensor:
    """
    Context vectors for a batch of datasets, shape (B, context_dim).

    `weights` may hold plain arrays or tape variables; the result is
    differentiable with respect to the latter.
    """
    if not datasets:
        raise DomainError("encode_batch: no datasets given")
    for D in datasets:
        if D.dim != config.dim:
            raise ShapeError(f"encode: dataset dimension {D.dim} does not match encoder dimension {config.dim}")
    features = [point_features(D) for D in datasets]
    sizes = [f.shape[0] for f in features]
    inputs = dc.constant(np.vstack(features))

    h = dc.tanh(inputs @ weights["W1"] + weights["b1"])
    h = dc.tanh(h @ weights["W2"] + weights["b2"])
    if config.attention:
        pooled = dc.concatenate([_attend_and_pool(config, weights, block) for block in _blocks(h, sizes)], axis=0)
    else:
        pooled = dc.constant(_pooling(sizes)) @ h
    return pooled @ weights["Wo"] + weights["bo"]


def _blocks(h: dc.Tensor, sizes: Sequence[int]) -> list[dc.Tensor]:
    blocks = []
    start = 0
    for n in sizes:
        blocks.append(h[start:start + n])
        start += n
    return blocks


def _attend_and_pool(config: EncoderConfig, weights: Weights, h: dc.Tensor) -> dc.Tensor:
    """Self-attention within one dataset's (n, width) block, then its (1, width) mean."""
    scale = 1.0 / math.sqrt(config.width)
    scores = dc.affine((h @ weights["Wq"]) @ (h @ weights["Wk"]).T, scale, 0.0)
    h = h + dc.softmax(scores, axis=-1) @ (h @ weights["Wv"])
    return h.mean(axis=0, keepdims=True)


def encode(params: EncoderParams, D: Dataset) -> np.ndarray:
    """Context vector c = E(D) as a plain array of length context_dim."""
    return encode_batch(params.config, params.weights, [D]).numpy()[0].copy()
