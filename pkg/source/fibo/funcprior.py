"""
Function prior for pretraining data.

Functions are drawn from a random-Fourier-feature approximation of a GP with
an RBF kernel on the unit hypercube, their maximizer is located by
multi-start L-BFGS-B, and (x*, D) training pairs are emitted with rejection
sampling that keeps the marginal of x* close to uniform.
"""

import itertools
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Iterator, Optional, Protocol

import numpy as np
from loguru import logger
from scipy.optimize import minimize

from .config import (
    ASCENT_GTOL,
    ASCENT_MAX_ITER,
    CORPUS_CHUNK_SIZE,
    CORPUS_DRAW_BUDGET_FACTOR,
    LENGTHSCALE_RANGE,
    NUM_FEATURES,
    RAW_SAMPLES,
    SIGNAL_VARIANCE_RANGE,
    CorpusQuotaError,
    DomainError,
    NonFiniteError,
)


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorHyperparams:
    """
    Hyperpriors of the approximate GP prior on [0,1]^dim.

    l_i ~ U(lengthscale_range), gamma^2 ~ U(signal_variance_range). A range
    with low == high fixes the value.
    """
    dim: int
    num_features: int = NUM_FEATURES
    lengthscale_range: tuple[float, float] = LENGTHSCALE_RANGE
    signal_variance_range: tuple[float, float] = SIGNAL_VARIANCE_RANGE

    def __post_init__(self):
        if self.dim < 1 or self.num_features < 1:
            raise ValueError(f"dim and num_features must be positive, got {self.dim}, {self.num_features}")
        for name in ("lengthscale_range", "signal_variance_range"):
            low, high = getattr(self, name)
            if not 0.0 < low <= high:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got ({low}, {high})")
        object.__setattr__(self, "lengthscale_range", tuple(float(v) for v in self.lengthscale_range))
        object.__setattr__(self, "signal_variance_range", tuple(float(v) for v in self.signal_variance_range))

    def midrange(self) -> tuple[np.ndarray, float]:
        """Mid-range lengthscales (one per dimension) and signal variance."""
        lengthscale = 0.5 * (self.lengthscale_range[0] + self.lengthscale_range[1])
        signal_variance = 0.5 * (self.signal_variance_range[0] + self.signal_variance_range[1])
        return np.full(self.dim, lengthscale), signal_variance

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_features": self.num_features,
            "lengthscale_range": list(self.lengthscale_range),
            "signal_variance_range": list(self.signal_variance_range),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PriorHyperparams":
        return cls(
            dim=int(data["dim"]),
            num_features=int(data["num_features"]),
            lengthscale_range=tuple(data["lengthscale_range"]),
            signal_variance_range=tuple(data["signal_variance_range"]),
        )


@dataclass(frozen=True)
class FeatureMap:
    """
    Random Fourier feature map phi(x) = sqrt(2 gamma^2 / m) cos(W x + b).

    W: (m, d), rows ~ N(0, diag(l^-2)); b: (m,), entries ~ U(0, 2 pi).
    """
    W: np.ndarray
    b: np.ndarray
    signal_variance: float
    lengthscales: np.ndarray

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @property
    def num_features(self) -> int:
        return self.W.shape[0]

    @property
    def scale(self) -> float:
        return math.sqrt(2.0 * self.signal_variance / self.num_features)

    def features(self, X: np.ndarray) -> np.ndarray:
        """phi for a batch of points, shape (n, m)."""
        X = _as_points(X, self.dim)
        return self.scale * np.cos(X @ self.W.T + self.b)


@dataclass(frozen=True)
class FunctionSample:
    """
    A parametric draw f(x) = phi(x) . beta from the approximate GP prior.

    Evaluable and differentiable in closed form.
    """
    feature_map: FeatureMap
    beta: np.ndarray

    @property
    def dim(self) -> int:
        return self.feature_map.dim

    @property
    def W(self) -> np.ndarray:
        return self.feature_map.W

    @property
    def b(self) -> np.ndarray:
        return self.feature_map.b

    @property
    def signal_variance(self) -> float:
        return self.feature_map.signal_variance

    @property
    def lengthscales(self) -> np.ndarray:
        return self.feature_map.lengthscales

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Values at a batch of points, shape (n,)."""
        return self.feature_map.features(X) @ self.beta

    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise DomainError(f"point has dimension {x.shape[0]}, function has {self.dim}")
        phase = self.W @ x + self.b
        scale = self.feature_map.scale
        value = scale * float(np.cos(phase) @ self.beta)
        gradient = -scale * (self.W.T @ (np.sin(phase) * self.beta))
        return value, gradient

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "beta": self.beta.tolist(),
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FunctionSample":
        feature_map = FeatureMap(
            W=np.asarray(data["W"], dtype=np.float64),
            b=np.asarray(data["b"], dtype=np.float64),
            signal_variance=float(data["signal_variance"]),
            lengthscales=np.asarray(data["lengthscales"], dtype=np.float64),
        )
        return cls(feature_map, np.asarray(data["beta"], dtype=np.float64))


class Differentiable(Protocol):
    """Anything find_optimum can ascend: batch values plus a pointwise gradient."""

    dim: int

    def evaluate(self, X: np.ndarray) -> np.ndarray: ...

    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class Dataset:
    """Observed points X (n, d) in the unit cube and values y (n,)."""
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"dataset shapes do not match: X {X.shape}, y {y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.X[index], self.y[index])

    def extend(self, X: np.ndarray, y: np.ndarray) -> "Dataset":
        return Dataset(np.vstack([self.X, np.atleast_2d(X)]), np.concatenate([self.y, np.ravel(y)]))

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0))


@dataclass(frozen=True)
class TrainingPair:
    """(x*, D) from one function draw; y_star = f(x*) kept for diagnostics."""
    x_star: np.ndarray
    dataset: Dataset
    y_star: float


@dataclass
class CorpusReport:
    """Outcome of rejection sampling: per-bin fill counts and the number of draws."""
    bins_per_dim: int
    quota: int
    bin_counts: list[int]
    draws: int
    accepted: int

    def to_dict(self) -> dict:
        return {
            "bins_per_dim": self.bins_per_dim,
            "quota": self.quota,
            "bin_counts": list(self.bin_counts),
            "draws": self.draws,
            "accepted": self.accepted,
        }


@dataclass
class Corpus:
    """A list of training pairs plus the prior that generated them."""
    hp: PriorHyperparams
    pairs: list[TrainingPair] = field(default_factory=list)
    report: Optional[CorpusReport] = None

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def dim(self) -> int:
        return self.hp.dim


# ---------------------------------------------------------------------------
# Sampling and evaluation
# ---------------------------------------------------------------------------

def _as_points(X: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != dim:
        raise DomainError(f"points have dimension {X.shape[1]}, expected {dim}")
    return X


def sample_feature_map(
    hp: PriorHyperparams,
    rng: np.random.Generator,
    lengthscales: Optional[np.ndarray] = None,
    signal_variance: Optional[float] = None,
) -> FeatureMap:
    """
    Draw an RFF basis; kernel hyperparameters come from the hyperpriors unless given.
    """
    if lengthscales is None:
        lengthscales = rng.uniform(*hp.lengthscale_range, size=hp.dim)
    if signal_variance is None:
        signal_variance = float(rng.uniform(*hp.signal_variance_range))
    lengthscales = np.asarray(lengthscales, dtype=np.float64).reshape(hp.dim)
    W = rng.standard_normal((hp.num_features, hp.dim)) / lengthscales
    b = rng.uniform(0.0, 2.0 * np.pi, size=hp.num_features)
    return FeatureMap(W=W, b=b, signal_variance=float(signal_variance), lengthscales=lengthscales)


def sample_function(hp: PriorHyperparams, rng: np.random.Generator) -> FunctionSample:
    """Draw f ~ p(f): hyperparameters, RFF basis, and weights beta ~ N(0, I)."""
    feature_map = sample_feature_map(hp, rng)
    beta = rng.standard_normal(hp.num_features)
    return FunctionSample(feature_map, beta)


def eval_function(fs: FunctionSample, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Closed-form value and gradient of a function sample at one point."""
    return fs.value_and_gradient(x)


def rbf_kernel(x: np.ndarray, x_prime: np.ndarray, lengthscales: np.ndarray, signal_variance: float) -> float:
    """k(x, x') = gamma^2 exp(-0.5 sum_i (x_i - x'_i)^2 / l_i^2)."""
    diff = (np.asarray(x) - np.asarray(x_prime)) / np.asarray(lengthscales)
    return float(signal_variance * np.exp(-0.5 * np.sum(diff * diff)))


def find_optimum(
    fn: Differentiable,
    restarts: int,
    rng: np.random.Generator,
    raw_samples: int = RAW_SAMPLES,
) -> tuple[np.ndarray, float]:
    """
    Box-constrained multi-start ascent on [0,1]^d.

    `raw_samples` uniform points are screened and the best `restarts` of
    them start an L-BFGS-B ascent; the best end point wins.

    Returns:
        (x_star, y_star) with y_star = f(x_star)

    Raises:
        ValueError:     restarts < 1
        NonFiniteError: the function returned NaN/Inf during the ascent
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    dim = fn.dim
    candidates = rng.uniform(0.0, 1.0, size=(max(raw_samples, restarts), dim))
    values = fn.evaluate(candidates)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite function value while screening ascent starts")
    order = np.argsort(-values, kind="stable")[:restarts]

    def negated(x: np.ndarray) -> tuple[float, np.ndarray]:
        value, gradient = fn.value_and_gradient(x)
        if not (np.isfinite(value) and np.all(np.isfinite(gradient))):
            raise NonFiniteError(f"non-finite function value during ascent at {x}")
        return -value, -gradient

    bounds = [(0.0, 1.0)] * dim
    best_x, best_y = None, -np.inf
    for start, start_value in zip(candidates[order], values[order]):
        result = minimize(
            negated, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": ASCENT_MAX_ITER, "gtol": ASCENT_GTOL},
        )
        x = np.clip(result.x, 0.0, 1.0)
        y = float(fn.value_and_gradient(x)[0])
        if start_value > y:
            x, y = start, float(start_value)
        if y > best_y:
            best_x, best_y = x, y
    return best_x, best_y


def sample_dataset(fs: FunctionSample, n: int, rng: np.random.Generator) -> Dataset:
    """n i.i.d. uniform points with exact (noiseless) function values."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    X = rng.uniform(0.0, 1.0, size=(n, fs.dim))
    return Dataset(X, fs.evaluate(X))


# ---------------------------------------------------------------------------
# Corpus generation with rejection sampling on the optimum location
# ---------------------------------------------------------------------------

def optimum_bin(x_star: np.ndarray, bins_per_dim: int) -> int:
    """Flat index of the equal-width box containing x_star (last box closed)."""
    cells = np.minimum(np.floor(np.asarray(x_star) * bins_per_dim).astype(int), bins_per_dim - 1)
    cells = np.maximum(cells, 0)
    return int(np.ravel_multi_index(tuple(cells), (bins_per_dim,) * len(cells)))


@dataclass(frozen=True)
class _ChunkTask:
    hp: PriorHyperparams
    seed_seq: np.random.SeedSequence
    size: int
    n_min: int
    n_max: int
    restarts: int


def _draw_candidate(task: _ChunkTask, rng: np.random.Generator) -> Optional[TrainingPair]:
    """One candidate pair, or None when D holds a value above the ascent result."""
    fs = sample_function(task.hp, rng)
    x_star, y_star = find_optimum(fs, task.restarts, rng)
    n = int(rng.integers(task.n_min, task.n_max + 1))
    dataset = sample_dataset(fs, n, rng)
    if dataset.y.max() > y_star:
        return None
    return TrainingPair(x_star=x_star, dataset=dataset, y_star=y_star)


def _generate_chunk(task: _ChunkTask) -> list[Optional[TrainingPair]]:
    """Worker entry point: one chunk of candidate pairs from its own seed."""
    rng = np.random.default_rng(task.seed_seq)
    return [_draw_candidate(task, rng) for _ in range(task.size)]


def _chunk_tasks(
    hp: PriorHyperparams,
    master: np.random.SeedSequence,
    n_min: int,
    n_max: int,
    restarts: int,
) -> Iterator[_ChunkTask]:
    while True:
        for child in master.spawn(64):
            yield _ChunkTask(hp, child, CORPUS_CHUNK_SIZE, n_min, n_max, restarts)


def generate_corpus(
    hp: PriorHyperparams,
    count: int,
    n_min: int,
    n_max: int,
    restarts: int,
    bins_per_dim: int,
    seed: int,
    workers: int = 1,
    max_draws: Optional[int] = None,
) -> Corpus:
    """
    Generate `count` training pairs with a near-uniform marginal over optima.

    The cube is split into bins_per_dim^d equal boxes, each with quota
    ceil(count / bins^d). Candidates are produced in fixed-size chunks with
    seeds spawned from `seed`, and accepted in chunk order, so the corpus is
    identical for any number of workers.

    Raises:
        ValueError:       invalid sizes
        CorpusQuotaError: the draw budget ran out before `count` pairs were accepted
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 1 <= n_min <= n_max:
        raise ValueError(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    if bins_per_dim < 1:
        raise ValueError(f"bins_per_dim must be >= 1, got {bins_per_dim}")

    num_bins = bins_per_dim ** hp.dim
    quota = math.ceil(count / num_bins)
    bin_counts = [0] * num_bins
    budget = max_draws if max_draws is not None else CORPUS_DRAW_BUDGET_FACTOR * count
    master = np.random.SeedSequence(seed)
    tasks = _chunk_tasks(hp, master, n_min, n_max, restarts)

    accepted: list[TrainingPair] = []
    draws = 0

    def consume(chunk: list[Optional[TrainingPair]]) -> bool:
        nonlocal draws
        for pair in chunk:
            if len(accepted) >= count or draws >= budget:
                return True
            draws += 1
            if pair is None:
                continue
            k = optimum_bin(pair.x_star, bins_per_dim)
            if bin_counts[k] < quota:
                bin_counts[k] += 1
                accepted.append(pair)
        return len(accepted) >= count or draws >= budget

    logger.info(
        f"Generating corpus: d={hp.dim}, count={count}, bins={num_bins}, "
        f"quota={quota}, workers={workers}"
    )

    if workers <= 1:
        for task in tasks:
            if consume(_generate_chunk(task)):
                break
    else:
        # imap drains its iterable eagerly, so feed it finite rounds
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=workers) as pool:
            done = False
            while not done:
                round_tasks = list(itertools.islice(tasks, 2 * workers))
                for chunk in pool.imap(_generate_chunk, round_tasks, chunksize=1):
                    if consume(chunk):
                        done = True
                        break

    report = CorpusReport(bins_per_dim, quota, bin_counts, draws, len(accepted))
    if len(accepted) < count:
        raise CorpusQuotaError(
            f"draw budget of {budget} exhausted with {len(accepted)}/{count} pairs; "
            f"bin fill counts {bin_counts} (quota {quota})",
            bin_counts=bin_counts, quota=quota, draws=draws,
        )
    logger.info(f"Corpus complete: {len(accepted)} pairs from {draws} draws")
    return Corpus(hp=hp, pairs=accepted, report=report)
