"""
Ask-tell sessions for human-in-the-loop optimization.

A session is a directory holding session.json (history, pending batch and
settings, in native coordinates) and session.lock. Every mutation is
written to a temp file and renamed into place, so a killed process leaves
either the old or the new state. The lock is advisory: one process per
session directory at a time.
"""

import copy
import fcntl
import json
import os
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from loguru import logger

from .bench import DomainMap
from .boloop import fibo_suggest, gap_value, random_suggest
from .config import SESSION_FILENAME, SESSION_LOCK_FILENAME, FormatError, SessionError
from .funcprior import Dataset
from .model import Checkpoint
from .utils import atomic_write_text


# Tolerance when told points are compared with the pending batch
_POINT_TOLERANCE = 1e-9


@dataclass
class SessionState:
    dim: int
    domain: DomainMap
    checkpoint: str                                 # path of the checkpoint used by suggest
    seed: int
    experiment_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    history_X: np.ndarray = None                    # (n, d) native coordinates
    history_y: np.ndarray = None                    # (n,)
    pending: Optional[np.ndarray] = None            # (q, d) native coordinates awaiting results
    round: int = 0                                  # completed suggest calls
    initial_size: int = 0                           # size of the first batch of results, for GAP
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    updated_at: str = ""

    def __post_init__(self):
        if self.domain.dim != self.dim:
            raise SessionError(f"bounds have dimension {self.domain.dim}, session has {self.dim}")
        if self.history_X is None:
            self.history_X = np.zeros((0, self.dim))
        if self.history_y is None:
            self.history_y = np.zeros(0)

    @property
    def size(self) -> int:
        return int(self.history_y.size)

    @property
    def has_pending(self) -> bool:
        return self.pending is not None and len(self.pending) > 0

    def unit_dataset(self) -> Dataset:
        return Dataset(np.clip(self.domain.to_unit(self.history_X), 0.0, 1.0), self.history_y.copy())

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "dim": self.dim,
            "bounds": self.domain.to_dict(),
            "checkpoint": self.checkpoint,
            "seed": self.seed,
            "round": self.round,
            "initial_size": self.initial_size,
            "history": {"X": self.history_X.tolist(), "y": self.history_y.tolist()},
            "pending": None if self.pending is None else self.pending.tolist(),
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionState":
        dim = int(data["dim"])
        pending = data.get("pending")
        return cls(
            dim=dim,
            domain=DomainMap.from_dict(data["bounds"]),
            checkpoint=data["checkpoint"],
            seed=int(data["seed"]),
            experiment_id=data["experiment_id"],
            history_X=np.asarray(data["history"]["X"], dtype=np.float64).reshape(-1, dim),
            history_y=np.asarray(data["history"]["y"], dtype=np.float64),
            pending=None if pending is None else np.asarray(pending, dtype=np.float64).reshape(-1, dim),
            round=int(data["round"]),
            initial_size=int(data.get("initial_size", 0)),
            created_at=data.get("created_at", ""),
            updated_at=data.get("updated_at", ""),
        )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def session_file(session_dir: Path) -> Path:
    return Path(session_dir) / SESSION_FILENAME


def session_exists(session_dir: Path) -> bool:
    return session_file(session_dir).is_file()


@contextmanager
def session_lock(session_dir: Path) -> Iterator[None]:
    """
    Hold the advisory lock of a session directory.

    Raises:
        SessionError: another process holds the lock
    """
    session_dir = Path(session_dir)
    session_dir.mkdir(parents=True, exist_ok=True)
    fd = os.open(session_dir / SESSION_LOCK_FILENAME, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as err:
            raise SessionError(f"session {session_dir} is in use by another process") from err
        yield
    finally:
        os.close(fd)


def load_session(session_dir: Path) -> SessionState:
    """
    Raises:
        SessionError: no session in this directory
        FormatError:  session.json cannot be parsed
    """
    path = session_file(session_dir)
    if not path.is_file():
        raise SessionError(f"no session in {session_dir} (start one with 'fibo suggest --checkpoint ... --bounds ...')")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return SessionState.from_dict(json.load(handle))
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise FormatError(f"{path} is not a valid session file: {err}") from err


def save_session(state: SessionState, session_dir: Path) -> None:
    state.updated_at = datetime.now().isoformat(timespec="seconds")
    atomic_write_text(session_file(session_dir), json.dumps(state.to_dict(), indent=2) + "\n")
    logger.debug(f"Saved session {state.experiment_id} ({state.size} results, round {state.round})")


def create_session(
    dim: int,
    domain: DomainMap,
    checkpoint: str,
    seed: int,
    experiment_id: Optional[str] = None,
) -> SessionState:
    state = SessionState(dim=dim, domain=domain, checkpoint=str(checkpoint), seed=seed)
    if experiment_id:
        state.experiment_id = experiment_id
    logger.info(f"New session {state.experiment_id}: d={dim}, bounds {domain.to_dict()}")
    return state


# ---------------------------------------------------------------------------
# Ask / tell
# ---------------------------------------------------------------------------

def _check_in_box(state: SessionState, X: np.ndarray) -> None:
    unit = state.domain.to_unit(X)
    if np.any(unit < -_POINT_TOLERANCE) or np.any(unit > 1.0 + _POINT_TOLERANCE):
        raise SessionError("points lie outside the session bounds")


def import_history(state: SessionState, X: np.ndarray, y: np.ndarray) -> SessionState:
    """Add externally evaluated results (native coordinates) to a session without a pending batch."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if state.has_pending:
        raise SessionError("cannot import history while a batch is pending")
    if X.shape != (y.size, state.dim):
        raise SessionError(f"history of shape {X.shape} with {y.size} values does not match d={state.dim}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise SessionError("history contains NaN or Inf")
    _check_in_box(state, X)
    new = copy.deepcopy(state)
    new.history_X = np.vstack([new.history_X, X])
    new.history_y = np.concatenate([new.history_y, y])
    if new.initial_size == 0:
        new.initial_size = y.size
    return new


def suggest(
    state: SessionState,
    q: int,
    checkpoint: Optional[Checkpoint] = None,
    force_discard: bool = False,
) -> tuple[SessionState, np.ndarray]:
    """
    Propose a batch of q native points and mark it pending.

    With no results yet the batch is the uniform initial design; otherwise
    it is fibo_suggest on the history mapped to the unit cube. The generator
    is seeded from (seed, round), so a repeated call on the same state gives
    the same batch.

    Returns:
        (new state, (q, d) native points); the input state is not modified

    Raises:
        SessionError: a pending batch is unresolved and force_discard is False,
                      or a checkpoint is required but missing or of another dimension
    """
    if q < 1:
        raise SessionError(f"q must be >= 1, got {q}")
    if state.has_pending:
        if not force_discard:
            raise SessionError(
                f"{len(state.pending)} suggested points are still pending; tell their results or use --force-discard"
            )
        logger.warning(f"Discarding {len(state.pending)} pending points of session {state.experiment_id}")

    rng = np.random.default_rng(np.random.SeedSequence([state.seed, state.round]))
    if state.size == 0:
        unit = random_suggest(state.dim, q, rng)
    else:
        if checkpoint is None:
            raise SessionError("a checkpoint is needed once the session has results")
        if checkpoint.dim != state.dim:
            raise SessionError(f"checkpoint has d={checkpoint.dim}, session has d={state.dim}")
        unit = fibo_suggest(checkpoint, state.unit_dataset(), q, rng)

    new = copy.deepcopy(state)
    new.pending = state.domain.to_native(unit)
    new.round += 1
    return new, new.pending.copy()


def tell(state: SessionState, y: np.ndarray, X: Optional[np.ndarray] = None) -> SessionState:
    """
    Record results for the pending batch and clear it.

    If X is given (e.g. from a results CSV) it must list the pending points
    in the same order.

    Raises:
        SessionError: nothing pending, wrong number of values, non-finite
                      values, or X does not match the pending points
    """
    if not state.has_pending:
        raise SessionError("no pending batch; run 'fibo suggest' first")
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != len(state.pending):
        raise SessionError(f"expected {len(state.pending)} results for the pending batch, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise SessionError("results must be finite")
    if X is not None:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        scale = state.domain.hi - state.domain.lo
        if X.shape != state.pending.shape or np.any(np.abs(X - state.pending) > _POINT_TOLERANCE * scale):
            raise SessionError("told points do not match the pending batch")

    new = copy.deepcopy(state)
    new.history_X = np.vstack([new.history_X, state.pending])
    new.history_y = np.concatenate([new.history_y, y])
    if new.initial_size == 0:
        new.initial_size = y.size
    new.pending = None
    return new


def status(state: SessionState, y_star: Optional[float] = None) -> dict:
    """History size, best-so-far and, when y* is given, GAP against the initial batch."""
    report = {
        "experiment_id": state.experiment_id,
        "dim": state.dim,
        "history_size": state.size,
        "pending": 0 if state.pending is None else len(state.pending),
        "round": state.round,
        "best_y": None,
        "best_x": None,
        "gap": None,
    }
    if state.size:
        best = int(np.argmax(state.history_y))
        report["best_y"] = float(state.history_y[best])
        report["best_x"] = state.history_X[best].tolist()
        if y_star is not None:
            y0 = float(np.max(state.history_y[:state.initial_size]))
            report["gap"] = gap_value(y0, report["best_y"], float(y_star))
    return report
