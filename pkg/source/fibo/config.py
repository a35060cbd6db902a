"""
Configuration constants and shared exceptions for fibo.
"""

import os
from pathlib import Path
from typing import Optional


# ============================================================================
# Function prior (random Fourier feature approximation of an RBF GP)
# ============================================================================
NUM_FEATURES = 512                  # m, number of random Fourier features
LENGTHSCALE_RANGE = (0.01, 5.0)     # l_i ~ U(low, high)
SIGNAL_VARIANCE_RANGE = (1.0, 2.0)  # gamma^2 ~ U(low, high)

# Multi-start ascent
RESTARTS_LOW_DIM = 32               # d <= 2
RESTARTS_HIGH_DIM = 64              # d = 3..4
RAW_SAMPLES = 2048                  # uniform screening points, best `restarts` become starts
ASCENT_MAX_ITER = 200
ASCENT_GTOL = 1e-8


# ============================================================================
# Corpus generation
# ============================================================================
N_MIN = 8
N_MAX = 100
BINS_PER_DIM = 4
CORPUS_CHUNK_SIZE = 32              # candidate pairs per worker task (fixed for determinism)
CORPUS_DRAW_BUDGET_FACTOR = 50      # max draws = factor * count


# ============================================================================
# Encoder / flow architecture
# ============================================================================
ENCODER_HIDDEN = 64
ENCODER_WIDTH = 64
CONTEXT_DIM_LOW_DIM = 64            # d <= 2
CONTEXT_DIM_HIGH_DIM = 128          # d = 3..4
Y_STD_FLOOR = 1e-8

SPLINE_BINS = 8                     # K
SPLINE_TAIL_BOUND = 3.0             # B
FLOW_BLOCKS_LOW_DIM = 4
FLOW_BLOCKS_HIGH_DIM = 6
CONDITIONER_HIDDEN = 64
TARGET_CLAMP_EPS = 1e-6             # x* clamped to [eps, 1-eps] before the inverse pass

# Powers of two keep the identity-initialised spline exact
MIN_BIN_WIDTH = 2.0 ** -10
MIN_BIN_HEIGHT = 2.0 ** -10
MIN_DERIVATIVE = 2.0 ** -10


# ============================================================================
# Training
# ============================================================================
EPOCHS = 40
BATCH_SIZE = 64
LEARNING_RATE = 3e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 10.0
VALIDATION_FRACTION = 0.1
AUGMENT_MIN = 1
AUGMENT_MAX = 100


# ============================================================================
# BO loop and benchmark
# ============================================================================
TOTAL_EVALUATIONS = 200
BATCH_SIZES = (10, 20, 50)
GP_TS_NOISE = 1e-6
GP_TS_RESTARTS = 32
BENCH_REGISTRY_SEED = 20240601     # seed for the prior-sampled benchmark objectives
PRIOR_OBJECTIVES_PER_DIM = 10
SUMMARY_COLUMNS = [
    "task-set", "objective", "method", "q",
    "gap-mean", "gap-se", "time-mean", "time-se",
]


# ============================================================================
# File formats
# ============================================================================
CORPUS_MAGIC = b"FIBC"
CORPUS_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"FIBM"
CHECKPOINT_FORMAT_VERSION = 1
SESSION_FILENAME = "session.json"
SESSION_LOCK_FILENAME = "session.lock"


# ============================================================================
# Environment overrides
# ============================================================================
ENV_WORKERS = "FIBO_WORKERS"
ENV_DATA_DIR = "FIBO_DATA_DIR"


def env_workers() -> Optional[int]:
    """Worker count from FIBO_WORKERS, or None when unset."""
    raw = os.environ.get(ENV_WORKERS)
    if raw is None or raw.strip() == "":
        return None
    value = int(raw)
    if value < 1:
        raise ValueError(f"{ENV_WORKERS} must be >= 1, got {value}")
    return value


def data_dir() -> Path:
    """Base directory for relative file arguments (FIBO_DATA_DIR or cwd)."""
    raw = os.environ.get(ENV_DATA_DIR)
    return Path(raw).expanduser() if raw else Path.cwd()


def restarts_for(dim: int) -> int:
    return RESTARTS_LOW_DIM if dim <= 2 else RESTARTS_HIGH_DIM


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------

class FiboError(Exception):
    """Base class for all fibo errors."""


class ShapeError(FiboError):
    """Tensor shapes are invalid for a primitive."""


class NonFiniteError(FiboError):
    """A NaN or Inf value appeared in a computation."""


class DomainError(FiboError):
    """A point lies outside the domain an operation accepts."""


class FormatError(FiboError):
    """A binary or text file does not match its declared format."""


class CorpusQuotaError(FiboError):
    """Rejection sampling could not fill the optimum bins within the draw budget."""

    def __init__(self, message: str, bin_counts: list[int], quota: int, draws: int):
        super().__init__(message)
        self.bin_counts = bin_counts
        self.quota = quota
        self.draws = draws


class NonFiniteLossError(FiboError):
    """The training loss is not finite; `pair_index` names the offending pair."""

    def __init__(self, message: str, pair_index: int):
        super().__init__(message)
        self.pair_index = pair_index


class TrainingDivergedError(FiboError):
    """Training produced a non-finite loss and was aborted; `checkpoint` is the last good state."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PosteriorError(FiboError):
    """A posterior covariance could not be factorised."""


class GapError(FiboError):
    """GAP normalisation is degenerate or its preconditions are violated."""


class SessionError(FiboError):
    """An ask-tell session operation violates the session protocol."""


class CheckpointMissingError(FiboError):
    """A benchmark needs a checkpoint for a dimension that was not supplied."""

    def __init__(self, message: str, dims: list[int]):
        super().__init__(message)
        self.dims = dims
