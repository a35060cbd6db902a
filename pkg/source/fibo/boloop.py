"""
Batch Bayesian-optimization loop, suggestion methods and the GAP metric.

Every method proposes a batch of q points in [0,1]^d from the data seen so
far: FIBO samples the pretrained flow conditioned on D (no inner
optimization), GP Thompson sampling maximizes posterior function draws of a
Bayesian linear model on random Fourier features, random search samples
uniformly.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import pandas as pd
from loguru import logger
from scipy import linalg

from .config import (
    GP_TS_NOISE,
    GP_TS_RESTARTS,
    RAW_SAMPLES,
    TOTAL_EVALUATIONS,
    DomainError,
    FiboError,
    GapError,
    PosteriorError,
    ShapeError,
)
from .funcprior import (
    Dataset,
    FeatureMap,
    FunctionSample,
    PriorHyperparams,
    find_optimum,
    sample_feature_map,
)
from .model import Checkpoint
from .utils import atomic_write_text


# ---------------------------------------------------------------------------
# Suggestion methods
# ---------------------------------------------------------------------------

def fibo_suggest(checkpoint: Checkpoint, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray:
    """
    q points from p_theta(x* | D): one encoding, q latent draws, one batched flow pass.

    Raises:
        ShapeError:  dataset dimension differs from the checkpoint's
        DomainError: D is empty
    """
    if D.dim != checkpoint.dim:
        raise ShapeError(f"dataset has dimension {D.dim}, checkpoint expects {checkpoint.dim}")
    if len(D) == 0:
        raise DomainError("fibo_suggest: dataset is empty")
    return checkpoint.model.sample(D, q, rng)


def gp_posterior_weights(
    feature_map: FeatureMap,
    D: Dataset,
    noise: float,
    rng: np.random.Generator,
    count: int = 1,
) -> np.ndarray:
    """
    `count` draws of beta ~ p(beta | D) for y = phi(x) . beta + N(0, noise).

    Uses pathwise conditioning: beta = beta0 + Phi^T (Phi Phi^T + noise I)^-1 (y - Phi beta0 - eps)
    with beta0 ~ N(0, I), eps ~ N(0, noise I), which is an exact posterior draw.
    y is divided by its root-mean-square first and the draws are scaled back.

    Raises:
        PosteriorError: the n x n system could not be factorized or solved
    """
    if noise <= 0.0:
        raise ValueError(f"noise must be positive, got {noise}")
    phi = feature_map.features(D.X)
    n, m = phi.shape
    scale = float(np.sqrt(np.mean(D.y * D.y))) if n else 1.0
    scale = scale if scale > 0.0 else 1.0
    y = D.y / scale

    gram = phi @ phi.T + noise * np.eye(n)
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as err:
        raise PosteriorError(f"posterior covariance is singular: {err}") from err

    draws = np.empty((count, m))
    for i in range(count):
        beta0 = rng.standard_normal(m)
        eps = np.sqrt(noise) * rng.standard_normal(n)
        try:
            correction = linalg.cho_solve(factor, y - phi @ beta0 - eps)
        except ValueError as err:
            raise PosteriorError(f"posterior draw failed: {err}") from err
        draws[i] = beta0 + phi.T @ correction
    if not np.all(np.isfinite(draws)):
        raise PosteriorError("posterior draw is not finite")
    return draws * scale


def gp_ts_suggest(
    D: Dataset,
    q: int,
    hp: PriorHyperparams,
    noise: float,
    rng: np.random.Generator,
    restarts: int = GP_TS_RESTARTS,
    feature_map: Optional[FeatureMap] = None,
    raw_samples: int = RAW_SAMPLES,
) -> np.ndarray:
    """
    Thompson sampling with an RFF Bayesian linear model: q posterior draws,
    each maximized by multi-start ascent.

    The feature map (and with it the kernel hyperparameters, fixed at the
    hyperprior mid-range) is drawn from rng unless given.
    """
    if len(D) == 0:
        raise DomainError("gp_ts_suggest: dataset is empty")
    if D.dim != hp.dim:
        raise ShapeError(f"dataset has dimension {D.dim}, prior has {hp.dim}")
    if feature_map is None:
        lengthscales, signal_variance = hp.midrange()
        feature_map = sample_feature_map(hp, rng, lengthscales, signal_variance)
    betas = gp_posterior_weights(feature_map, D, noise, rng, count=q)
    points = np.empty((q, D.dim))
    for i, beta in enumerate(betas):
        points[i], _ = find_optimum(FunctionSample(feature_map, beta), restarts, rng, raw_samples)
    return points


def random_suggest(d: int, q: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(q, d))


class Suggester(Protocol):
    name: str

    def suggest(self, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray: ...


class FiboSuggester:
    name = "fibo"

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint

    def suggest(self, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray:
        return fibo_suggest(self.checkpoint, D, q, rng)


class GpThompsonSuggester:
    """GP-TS with one feature map per run, drawn on the first call."""

    name = "gp-ts"

    def __init__(
        self,
        hp: PriorHyperparams,
        noise: float = GP_TS_NOISE,
        restarts: int = GP_TS_RESTARTS,
        raw_samples: int = RAW_SAMPLES,
    ):
        self.hp = hp
        self.noise = noise
        self.restarts = restarts
        self.raw_samples = raw_samples
        self.feature_map: Optional[FeatureMap] = None

    def suggest(self, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray:
        if self.feature_map is None:
            lengthscales, signal_variance = self.hp.midrange()
            self.feature_map = sample_feature_map(self.hp, rng, lengthscales, signal_variance)
        return gp_ts_suggest(D, q, self.hp, self.noise, rng, self.restarts, self.feature_map, self.raw_samples)


class RandomSuggester:
    name = "random"

    def __init__(self, dim: int):
        self.dim = dim

    def suggest(self, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray:
        return random_suggest(self.dim, q, rng)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

class UnitObjective(Protocol):
    """An objective on [0,1]^d, larger is better."""
    name: str
    dim: int

    def __call__(self, x_unit: np.ndarray) -> float: ...


@dataclass
class IterationRecord:
    iteration: int                  # 0 = initial design
    X: np.ndarray                   # (q, d) unit-cube points
    y: np.ndarray                   # (q,)
    best: float                     # cumulative best after this batch
    suggest_seconds: float          # 0 for the initial design

    def to_dict(self) -> dict:
        return {
            "type": "iteration",
            "iteration": self.iteration,
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "best": self.best,
            "suggest_seconds": self.suggest_seconds,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IterationRecord":
        return cls(
            iteration=int(data["iteration"]),
            X=np.asarray(data["X"], dtype=np.float64),
            y=np.asarray(data["y"], dtype=np.float64),
            best=float(data["best"]),
            suggest_seconds=float(data["suggest_seconds"]),
        )


@dataclass
class RunTrace:
    """
    One optimization run. status is 'ok' or 'error'; on error, error_msg
    says why and the records stop at the last complete batch.
    """
    objective: str
    method: str
    seed: int
    q: int
    total_evals: int
    dim: int
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "ok"
    error_msg: str = ""

    @property
    def iterations(self) -> int:
        """T = (total - q) / q planned batches after the initial design."""
        return (self.total_evals - self.q) // self.q

    @property
    def y(self) -> np.ndarray:
        if not self.records:
            return np.zeros(0)
        return np.concatenate([r.y for r in self.records])

    @property
    def X(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.dim))
        return np.vstack([r.X for r in self.records])

    @property
    def best_so_far(self) -> np.ndarray:
        """Running maximum per evaluation."""
        return np.maximum.accumulate(self.y) if self.records else np.zeros(0)

    @property
    def initial_best(self) -> float:
        return float(np.max(self.records[0].y))

    @property
    def suggest_seconds(self) -> np.ndarray:
        return np.array([r.suggest_seconds for r in self.records[1:]])

    def header(self) -> dict:
        return {
            "type": "header",
            "objective": self.objective,
            "method": self.method,
            "seed": self.seed,
            "q": self.q,
            "T": self.iterations,
            "total_evals": self.total_evals,
            "dim": self.dim,
            "status": self.status,
            "error_msg": self.error_msg,
        }

    def to_jsonl(self, path: Path) -> None:
        lines = [json.dumps(self.header())] + [json.dumps(r.to_dict()) for r in self.records]
        atomic_write_text(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: Path) -> "RunTrace":
        with open(path, "r", encoding="utf-8") as handle:
            documents = [json.loads(line) for line in handle if line.strip()]
        if not documents or documents[0].get("type") != "header":
            raise ValueError(f"{path} does not start with a trace header")
        head = documents[0]
        return cls(
            objective=head["objective"],
            method=head["method"],
            seed=int(head["seed"]),
            q=int(head["q"]),
            total_evals=int(head["total_evals"]),
            dim=int(head["dim"]),
            records=[IterationRecord.from_dict(d) for d in documents[1:]],
            status=head.get("status", "ok"),
            error_msg=head.get("error_msg", ""),
        )


def traces_to_frame(traces: list[RunTrace]) -> pd.DataFrame:
    """One row per evaluation, for plotting tools."""
    rows = []
    for trace in traces:
        evaluation = 0
        best = -np.inf
        for record in trace.records:
            for x, y in zip(record.X, record.y):
                evaluation += 1
                best = max(best, float(y))
                row = {
                    "objective": trace.objective,
                    "method": trace.method,
                    "q": trace.q,
                    "seed": trace.seed,
                    "iteration": record.iteration,
                    "evaluation": evaluation,
                    "y": float(y),
                    "best": best,
                    "suggest_seconds": record.suggest_seconds,
                }
                row.update({f"x{i}": float(v) for i, v in enumerate(x)})
                rows.append(row)
    return pd.DataFrame(rows)


def best_value_across(traces: list[RunTrace]) -> float:
    """Best observed value across runs, the y* stand-in when the optimum is unknown."""
    values = [float(np.max(t.y)) for t in traces if t.records]
    if not values:
        raise GapError("no observations to take the best value from")
    return max(values)


# ---------------------------------------------------------------------------
# BO loop
# ---------------------------------------------------------------------------

def _evaluate_batch(objective: UnitObjective, X: np.ndarray) -> np.ndarray:
    y = np.array([float(objective(x)) for x in X])
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise FloatingPointError(f"objective returned {y[bad]} at {X[bad].tolist()}")
    return y


def run_bo(
    objective: UnitObjective,
    suggester: Suggester,
    q: int,
    total_evals: int = TOTAL_EVALUATIONS,
    seed: int = 0,
) -> RunTrace:
    """
    Initial design of q uniform points, then T = (total - q) / q batches of q
    suggestions. Suggestion time is measured around the suggest call only.

    A non-finite objective value (or a failing suggester) is recorded in the
    trace as status='error' and stops the run.

    Raises:
        ValueError: total_evals is not q times a positive integer
    """
    if q < 1 or total_evals < q or (total_evals - q) % q != 0:
        raise ValueError(f"total_evals={total_evals} must be q * k for an integer k >= 1 (q={q})")
    rng = np.random.default_rng(seed)
    trace = RunTrace(objective=objective.name, method=suggester.name, seed=seed, q=q,
                     total_evals=total_evals, dim=objective.dim)

    X = random_suggest(objective.dim, q, rng)
    try:
        y = _evaluate_batch(objective, X)
    except FloatingPointError as err:
        return _fail(trace, f"initial design: {err}")
    trace.records.append(IterationRecord(0, X, y, float(np.max(y)), 0.0))
    D = Dataset(X, y)

    for t in range(1, trace.iterations + 1):
        start = time.perf_counter()
        try:
            X = suggester.suggest(D, q, rng)
        except (FiboError, linalg.LinAlgError) as err:
            return _fail(trace, f"iteration {t}: suggester failed: {err}")
        elapsed = time.perf_counter() - start

        X = np.asarray(X, dtype=np.float64).reshape(q, objective.dim)
        X = np.clip(X, 0.0, 1.0)
        try:
            y = _evaluate_batch(objective, X)
        except FloatingPointError as err:
            return _fail(trace, f"iteration {t}: {err}")
        D = D.extend(X, y)
        best = max(trace.records[-1].best, float(np.max(y)))
        trace.records.append(IterationRecord(t, X, y, best, elapsed))
        logger.debug(f"{trace.objective}/{trace.method} q={q} seed={seed}: iteration {t}, best {best:.6g}")

    return trace


def _fail(trace: RunTrace, message: str) -> RunTrace:
    logger.error(f"{trace.objective}/{trace.method} q={trace.q} seed={trace.seed}: {message}")
    trace.status = "error"
    trace.error_msg = message
    return trace


# ---------------------------------------------------------------------------
# GAP
# ---------------------------------------------------------------------------

@dataclass
class GapSeries:
    values: np.ndarray      # per evaluation, clipped to [0, 1]

    @property
    def final(self) -> float:
        return float(self.values[-1])


def gap_value(y0: float, yi: float, y_star: float) -> float:
    """(y_i - y_0) / (y* - y_0), clipped to [0, 1]."""
    if y_star < y0:
        raise GapError(f"y*={y_star} is below the initial best y0={y0}")
    if y_star == y0:
        if yi >= y0:
            return 1.0
        raise GapError("degenerate normalization: y* equals y0")
    return float(np.clip((yi - y0) / (y_star - y0), 0.0, 1.0))


def gap(trace: RunTrace, y_star: float) -> GapSeries:
    """
    GAP of the cumulative best after every evaluation, relative to the best
    of the initial design.

    If y* equals y0 the optimum was attained in the initial design and the
    series is 1 from the attaining evaluation on.

    Raises:
        GapError: y* < y0, or an empty trace
    """
    if not trace.records:
        raise GapError("trace has no evaluations")
    y0 = trace.initial_best
    best = trace.best_so_far
    if y_star < y0:
        raise GapError(f"y*={y_star} is below the initial best y0={y0}")
    if y_star == y0:
        return GapSeries((best >= y0).astype(np.float64))
    return GapSeries(np.clip((best - y0) / (y_star - y0), 0.0, 1.0))
