"""
Hardware detection for fibo.

Detects CPU/RAM capabilities to pick default worker counts for corpus
generation and benchmark suites. Results are stored in HardwareInfo.
"""

from dataclasses import dataclass
from typing import Optional

import psutil
from loguru import logger

from .config import env_workers


# ---------------------------------------------------------------------------
# Dataclass
# ---------------------------------------------------------------------------

@dataclass
class HardwareInfo:
    """
    Hardware capabilities of the current host.

    workers_default leaves two logical cores free on hosts with at least
    three of them, and uses every core otherwise.
    """
    # CPU
    cpu_count_physical: int
    cpu_count_logical: int
    workers_default: int                # max(1, logical - 2) if logical >= 3 else logical

    # RAM
    ram_total_gb: float


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def detect_hardware() -> HardwareInfo:
    """
    Detect CPU counts and RAM via psutil.

    Returns:
        HardwareInfo dataclass instance.
    """
    logical = psutil.cpu_count(logical=True) or 1
    physical = psutil.cpu_count(logical=False) or logical

    if logical >= 3:
        workers = logical - 2
    else:
        workers = logical

    ram_bytes = psutil.virtual_memory().total
    ram_gb = round(ram_bytes / (1024 ** 3), 1)

    info = HardwareInfo(
        cpu_count_physical=physical,
        cpu_count_logical=logical,
        workers_default=workers,
        ram_total_gb=ram_gb,
    )

    logger.debug(
        f"Hardware detected: CPU={logical} logical / {physical} physical | "
        f"RAM={ram_gb} GB | default workers={workers}"
    )

    return info


def resolve_workers(requested: Optional[int] = None) -> int:
    """
    Worker count: explicit flag, then FIBO_WORKERS, then the detected default.

    Raises:
        ValueError: requested < 1
    """
    if requested is not None:
        if requested < 1:
            raise ValueError(f"workers must be >= 1, got {requested}")
        return requested
    from_env = env_workers()
    if from_env is not None:
        return from_env
    return detect_hardware().workers_default
