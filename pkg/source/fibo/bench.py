"""
Benchmark harness: objective registry, domain mapping and suite driver.

Objectives are evaluated on the unit cube and mapped to their native box.
Classic minimization test functions are negated at registration so larger
is always better. Prior-sampled objectives are fixed RFF draws from a
registry seed, stored next to the results.

Suite cells (objective x method x q x seed) are independent and run in a
spawn pool; every finished cell writes its trace file atomically, so an
interrupted suite keeps the cells it completed.
"""

import json
import multiprocessing
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
from loguru import logger

from .boloop import (
    FiboSuggester,
    GpThompsonSuggester,
    RandomSuggester,
    RunTrace,
    Suggester,
    gap,
    run_bo,
    traces_to_frame,
)
from .config import (
    BENCH_REGISTRY_SEED,
    GP_TS_NOISE,
    GP_TS_RESTARTS,
    NUM_FEATURES,
    PRIOR_OBJECTIVES_PER_DIM,
    SUMMARY_COLUMNS,
    TOTAL_EVALUATIONS,
    CheckpointMissingError,
    DomainError,
    FormatError,
    ShapeError,
    restarts_for,
)
from .funcprior import FunctionSample, PriorHyperparams, find_optimum, sample_function
from .model import load_checkpoint, peek_dimension
from .utils import atomic_write_text, find_files_recursive, resolve_path


# ---------------------------------------------------------------------------
# Domain mapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainMap:
    """Per-dimension affine map between the box [lo, hi] and [0,1]^d."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).ravel()
        hi = np.asarray(self.hi, dtype=np.float64).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise ShapeError(f"bounds must be two equal-length vectors, got {lo.shape} and {hi.shape}")
        if not np.all(hi > lo):
            raise ValueError(f"every upper bound must exceed its lower bound: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @classmethod
    def unit(cls, dim: int) -> "DomainMap":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def cube(cls, low: float, high: float, dim: int) -> "DomainMap":
        return cls(np.full(dim, low), np.full(dim, high))

    def to_native(self, u: np.ndarray) -> np.ndarray:
        # convex combination is exact at both corners
        u = np.asarray(u, dtype=np.float64)
        return self.lo * (1.0 - u) + self.hi * u

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DomainMap":
        return cls(np.asarray(data["lo"]), np.asarray(data["hi"]))


# ---------------------------------------------------------------------------
# Test functions (native coordinates, rows of X are points)
# ---------------------------------------------------------------------------

def ackley(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    a, b, c = 20.0, 0.2, 2.0 * np.pi
    term1 = -a * np.exp(-b * np.sqrt(np.mean(X * X, axis=1)))
    term2 = -np.exp(np.mean(np.cos(c * X), axis=1))
    return term1 + term2 + a + np.e


def levy(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    w = 1.0 + (X - 1.0) / 4.0
    head = np.sin(np.pi * w[:, 0]) ** 2
    body = np.sum((w[:, :-1] - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * w[:, :-1] + 1.0) ** 2), axis=1)
    tail = (w[:, -1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * w[:, -1]) ** 2)
    return head + body + tail


def rosenbrock(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.sum(100.0 * (X[:, 1:] - X[:, :-1] ** 2) ** 2 + (X[:, :-1] - 1.0) ** 2, axis=1)


_HARTMANN3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_HARTMANN3_A = np.array([
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
])
_HARTMANN3_P = 1e-4 * np.array([
    [3689.0, 1170.0, 2673.0],
    [4699.0, 4387.0, 7470.0],
    [1091.0, 8732.0, 5547.0],
    [381.0, 5743.0, 8828.0],
])
HARTMANN3_OPTIMUM = 3.86278
HARTMANN3_ARGMAX = np.array([0.114614, 0.555649, 0.852547])


def hartmann3(X: np.ndarray) -> np.ndarray:
    """Already in maximization form."""
    X = np.atleast_2d(X)
    sq = np.sum(_HARTMANN3_A[None] * (X[:, None, :] - _HARTMANN3_P[None]) ** 2, axis=2)
    return np.exp(-sq) @ _HARTMANN3_ALPHA


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

@dataclass
class Objective:
    """
    A registered benchmark objective, callable on the unit cube.

    func maps native points (n, d) to values under the maximization
    convention. optimum_value is exact for analytic functions and an
    ascent estimate for prior samples.
    """
    name: str
    domain: DomainMap
    func: Callable[[np.ndarray], np.ndarray]
    task_set: str                                   # 'synthetic' | 'prior'
    optimum_value: Optional[float] = None
    optimum_location: Optional[np.ndarray] = None   # native coordinates
    function_sample: Optional[FunctionSample] = None

    @property
    def dim(self) -> int:
        return self.domain.dim

    def __call__(self, x_unit: np.ndarray) -> float:
        return eval_objective(self, x_unit)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task_set": self.task_set,
            "domain": self.domain.to_dict(),
            "optimum_value": self.optimum_value,
            "optimum_location": None if self.optimum_location is None else self.optimum_location.tolist(),
            "function_sample": None if self.function_sample is None else self.function_sample.to_dict(),
        }


def eval_objective(obj: Objective, x_unit: np.ndarray) -> float:
    """
    Raises:
        ShapeError:  x_unit is not a point of dimension obj.dim
        DomainError: x_unit lies outside [0,1]^d
    """
    x_unit = np.asarray(x_unit, dtype=np.float64)
    if x_unit.shape != (obj.dim,):
        raise ShapeError(f"{obj.name} expects a point of shape ({obj.dim},), got {x_unit.shape}")
    if np.any(x_unit < 0.0) or np.any(x_unit > 1.0):
        raise DomainError(f"{obj.name}: point {x_unit.tolist()} is outside the unit cube")
    return float(obj.func(obj.domain.to_native(x_unit)[None, :])[0])


def _negated(func: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    def maximized(X: np.ndarray) -> np.ndarray:
        return -func(X)
    maximized.__name__ = f"neg_{func.__name__}"
    return maximized


def _synthetic(name: str) -> Objective:
    base, dim = name.rstrip("0123456789"), int(name[len(name.rstrip("0123456789")):])
    if base == "ackley":
        return Objective(name, DomainMap.cube(-32.768, 32.768, dim), _negated(ackley), "synthetic",
                         0.0, np.zeros(dim))
    if base == "levy":
        return Objective(name, DomainMap.cube(-10.0, 10.0, dim), _negated(levy), "synthetic",
                         0.0, np.ones(dim))
    if base == "rosenbrock":
        return Objective(name, DomainMap.cube(-5.0, 10.0, dim), _negated(rosenbrock), "synthetic",
                         0.0, np.ones(dim))
    if base == "hartmann":
        return Objective(name, DomainMap.unit(3), hartmann3, "synthetic",
                         HARTMANN3_OPTIMUM, HARTMANN3_ARGMAX.copy())
    raise KeyError(name)


def prior_hyperparams(dim: int) -> PriorHyperparams:
    """Hyperprior the prior-sampled objectives are drawn from."""
    return PriorHyperparams(dim=dim, num_features=NUM_FEATURES)


def _prior_objective(dim: int, index: int) -> Objective:
    rng = np.random.default_rng(np.random.SeedSequence([BENCH_REGISTRY_SEED, dim, index]))
    fs = sample_function(prior_hyperparams(dim), rng)
    x_star, y_star = find_optimum(fs, restarts_for(dim), rng)
    return Objective(f"prior{dim}-{index}", DomainMap.unit(dim), fs.evaluate, "prior",
                     y_star, x_star, function_sample=fs)


SYNTHETIC_OBJECTIVES = ["ackley3", "ackley4", "levy3", "levy4", "rosenbrock3", "rosenbrock4", "hartmann3"]
PRIOR_DIMENSIONS = (1, 2, 3, 4)


def list_objectives() -> list[str]:
    prior = [f"prior{d}-{k}" for d in PRIOR_DIMENSIONS for k in range(PRIOR_OBJECTIVES_PER_DIM)]
    return SYNTHETIC_OBJECTIVES + prior


@lru_cache(maxsize=None)
def get_objective(name: str) -> Objective:
    """
    Look up a registered objective by name.

    Raises:
        KeyError: unknown name
    """
    if name in SYNTHETIC_OBJECTIVES:
        return _synthetic(name)
    if name.startswith("prior") and "-" in name:
        dim_part, index_part = name[len("prior"):].split("-", 1)
        if dim_part.isdigit() and index_part.isdigit():
            dim, index = int(dim_part), int(index_part)
            if dim in PRIOR_DIMENSIONS and index < PRIOR_OBJECTIVES_PER_DIM:
                return _prior_objective(dim, index)
    raise KeyError(f"unknown objective {name!r}; known: {', '.join(list_objectives())}")


def load_history_csv(path: Path, dim: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """
    Read an evaluation history with columns x0..x{d-1}, y (native coordinates).

    Used to feed results of external tasks into an ask-tell session.

    Raises:
        FormatError: missing columns, non-numeric or non-finite values
    """
    frame = pd.read_csv(path)
    x_columns = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if dim is None:
        dim = len(x_columns)
    expected = [f"x{i}" for i in range(dim)]
    if dim < 1 or x_columns != expected or "y" not in frame.columns:
        raise FormatError(f"{path}: expected columns {expected + ['y']}, got {list(frame.columns)}")
    try:
        X = frame[expected].to_numpy(dtype=np.float64)
        y = frame["y"].to_numpy(dtype=np.float64)
    except ValueError as err:
        raise FormatError(f"{path}: non-numeric values: {err}") from err
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FormatError(f"{path}: history contains NaN or Inf")
    return X, y


# ---------------------------------------------------------------------------
# Suite definition
# ---------------------------------------------------------------------------

METHODS = ("fibo", "gp-ts", "random")


@dataclass
class SuiteSpec:
    """
    Benchmark suite read from a JSON file.

    Example:
        {"objectives": ["prior2-0", "hartmann3"], "methods": ["fibo", "random"],
         "q": [10], "seeds": 5, "total_evals": 200,
         "checkpoints": {"2": "ckpt_d2.fibm"}, "output_dir": "results/suite"}

    `seeds` is a count (seeds 0..n-1) or an explicit list. Instead of
    `checkpoints` a `checkpoint_dir` may be given; it is searched for
    *.fibm files, keyed by their stored dimension.
    """
    objectives: list[str]
    methods: list[str]
    q: list[int]
    seeds: list[int]
    output_dir: Path
    total_evals: int = TOTAL_EVALUATIONS
    checkpoints: dict[int, Path] = field(default_factory=dict)
    workers: Optional[int] = None
    gp_noise: float = GP_TS_NOISE
    gp_restarts: int = GP_TS_RESTARTS
    resume: bool = False

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        for q in self.q:
            if q < 1 or self.total_evals < q or (self.total_evals - q) % q != 0:
                raise ValueError(f"total_evals={self.total_evals} is not a multiple of q={q}")
        for name in self.objectives:
            get_objective(name)

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteSpec":
        seeds = data.get("seeds", 1)
        seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
        q = data.get("q", [10])
        checkpoints = {int(d): resolve_path(p) for d, p in data.get("checkpoints", {}).items()}
        if "checkpoint_dir" in data:
            for path in find_files_recursive(resolve_path(data["checkpoint_dir"]), "*.fibm"):
                checkpoints.setdefault(peek_dimension(path), path)
        return cls(
            objectives=list(data["objectives"]),
            methods=list(data.get("methods", ["fibo", "random"])),
            q=[int(v) for v in (q if isinstance(q, list) else [q])],
            seeds=seeds,
            output_dir=resolve_path(data.get("output_dir", "bench_results")),
            total_evals=int(data.get("total_evals", TOTAL_EVALUATIONS)),
            checkpoints=checkpoints,
            workers=data.get("workers"),
            gp_noise=float(data.get("gp_noise", GP_TS_NOISE)),
            gp_restarts=int(data.get("gp_restarts", GP_TS_RESTARTS)),
            resume=bool(data.get("resume", False)),
        )

    @classmethod
    def from_json(cls, path: Path) -> "SuiteSpec":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def required_dims(self) -> list[int]:
        if "fibo" not in self.methods:
            return []
        return sorted({get_objective(name).dim for name in self.objectives})


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass
class BenchCell:
    """One (objective, method, q, seed) run of a suite."""
    objective: str
    method: str
    q: int
    seed: int

    # --- runtime fields ---
    status: str = 'pending'                 # 'pending'|'running'|'done'|'error'
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    error_msg: str = ''

    @property
    def trace_name(self) -> str:
        return f"{self.objective}_{self.method}_q{self.q}_s{self.seed}.jsonl"


@dataclass(frozen=True)
class _CellContext:
    total_evals: int
    checkpoint: Optional[Path]
    gp_noise: float
    gp_restarts: int
    trace_dir: Path


def _build_suggester(method: str, objective: Objective, ctx: _CellContext) -> Suggester:
    if method == "fibo":
        return FiboSuggester(load_checkpoint(ctx.checkpoint))
    if method == "gp-ts":
        return GpThompsonSuggester(prior_hyperparams(objective.dim), noise=ctx.gp_noise, restarts=ctx.gp_restarts)
    return RandomSuggester(objective.dim)


def _run_cell(job: tuple[BenchCell, _CellContext]) -> tuple[BenchCell, Optional[RunTrace]]:
    """Worker entry point; rebuilds objective and model from names and paths."""
    cell, ctx = job
    cell.status = 'running'
    cell.started_at = datetime.now()
    try:
        objective = get_objective(cell.objective)
        trace = run_bo(objective, _build_suggester(cell.method, objective, ctx), cell.q, ctx.total_evals, cell.seed)
        trace.to_jsonl(ctx.trace_dir / cell.trace_name)
    except Exception as e:
        logger.error(f"Bench cell {cell.trace_name} failed: {e}")
        cell.status = 'error'
        cell.error_msg = str(e)
        cell.finished_at = datetime.now()
        return cell, None
    cell.finished_at = datetime.now()
    if trace.status == "error":
        cell.status = 'error'
        cell.error_msg = trace.error_msg
    else:
        cell.status = 'done'
    return cell, trace


# ---------------------------------------------------------------------------
# Suite driver
# ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    cells: list[BenchCell]
    traces: list[RunTrace]
    summary: pd.DataFrame
    y_star: dict[str, float]

    @property
    def failed(self) -> list[BenchCell]:
        return [c for c in self.cells if c.status == 'error']


def _standard_error(values: pd.Series) -> float:
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def reference_optima(traces: list[RunTrace]) -> dict[str, float]:
    """
    y* per objective: the registered optimum, raised to the best value any
    run observed when a run beat it (possible for ascent estimates).
    """
    y_star: dict[str, float] = {}
    for trace in traces:
        if not trace.records:
            continue
        known = get_objective(trace.objective).optimum_value
        current = y_star.get(trace.objective, -np.inf if known is None else known)
        y_star[trace.objective] = max(current, float(np.max(trace.y)))
    return y_star


def summarize(traces: list[RunTrace], y_star: dict[str, float]) -> pd.DataFrame:
    """Mean and standard error of final GAP and mean suggestion time per (objective, method, q)."""
    rows = []
    for trace in traces:
        if trace.status != "ok":
            continue
        times = trace.suggest_seconds
        rows.append({
            "task-set": get_objective(trace.objective).task_set,
            "objective": trace.objective,
            "method": trace.method,
            "q": trace.q,
            "gap": gap(trace, y_star[trace.objective]).final,
            "time": float(np.mean(times)) if times.size else 0.0,
        })
    if not rows:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    frame = pd.DataFrame(rows)
    grouped = frame.groupby(["task-set", "objective", "method", "q"], sort=True)
    summary = grouped.agg(
        **{
            "gap-mean": ("gap", "mean"),
            "gap-se": ("gap", _standard_error),
            "time-mean": ("time", "mean"),
            "time-se": ("time", _standard_error),
        }
    ).reset_index()
    return summary[SUMMARY_COLUMNS]


def _write_objectives(spec: SuiteSpec) -> None:
    objective_dir = spec.output_dir / "objectives"
    for name in spec.objectives:
        objective = get_objective(name)
        if objective.task_set == "prior":
            atomic_write_text(objective_dir / f"{name}.json", json.dumps(objective.to_dict(), indent=2))


def run_suite(spec: SuiteSpec, workers: int = 1) -> SuiteResult:
    """
    Run every (objective, method, q, seed) cell and aggregate the summary.

    All methods share the initial design of a seed, since run_bo draws it
    first from a generator seeded with the cell seed.

    Raises:
        CheckpointMissingError: 'fibo' is requested for a dimension without a checkpoint
    """
    missing = [d for d in spec.required_dims() if d not in spec.checkpoints]
    if missing:
        raise CheckpointMissingError(f"no checkpoint for dimension(s) {missing}", dims=missing)
    for d in spec.required_dims():
        if not spec.checkpoints[d].is_file():
            raise CheckpointMissingError(f"checkpoint {spec.checkpoints[d]} for d={d} does not exist", dims=[d])

    trace_dir = spec.output_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    _write_objectives(spec)

    cells = [
        BenchCell(objective, method, q, seed)
        for objective in spec.objectives
        for method in spec.methods
        for q in spec.q
        for seed in spec.seeds
    ]

    finished: dict[int, tuple[BenchCell, RunTrace]] = {}
    pending: list[tuple[int, tuple[BenchCell, _CellContext]]] = []
    for index, cell in enumerate(cells):
        path = trace_dir / cell.trace_name
        if spec.resume and path.is_file():
            trace = RunTrace.from_jsonl(path)
            if trace.status == "ok":
                cell.status = 'done'
                finished[index] = (cell, trace)
                continue
        dim = get_objective(cell.objective).dim
        ctx = _CellContext(spec.total_evals, spec.checkpoints.get(dim), spec.gp_noise, spec.gp_restarts, trace_dir)
        pending.append((index, (cell, ctx)))

    logger.info(f"Bench suite: {len(cells)} cells ({len(finished)} resumed), workers={workers}")

    jobs = [job for _, job in pending]
    if workers <= 1:
        outcomes = map(_run_cell, jobs)
        results = list(_log_progress(outcomes, len(jobs)))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=workers) as pool:
            results = list(_log_progress(pool.imap(_run_cell, jobs, chunksize=1), len(jobs)))

    final_cells = list(cells)
    traces_by_index: dict[int, RunTrace] = {i: t for i, (_, t) in finished.items()}
    for (index, _), (cell, trace) in zip(pending, results):
        final_cells[index] = cell
        if trace is not None:
            traces_by_index[index] = trace
    traces = [traces_by_index[i] for i in sorted(traces_by_index)]

    y_star = reference_optima(traces)
    summary = summarize(traces, y_star)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(spec.output_dir / "summary.csv", summary.to_csv(index=False))
    atomic_write_text(spec.output_dir / "traces.csv", traces_to_frame(traces).to_csv(index=False))

    result = SuiteResult(cells=final_cells, traces=traces, summary=summary, y_star=y_star)
    if result.failed:
        logger.warning(f"Bench suite: {len(result.failed)} of {len(cells)} cells failed")
    return result


def _log_progress(outcomes, total: int):
    for done, (cell, trace) in enumerate(outcomes, start=1):
        state = cell.status if cell.status != 'error' else f"error ({cell.error_msg})"
        logger.info(f"[{done}/{total}] {cell.objective} {cell.method} q={cell.q} seed={cell.seed}: {state}")
        yield cell, trace