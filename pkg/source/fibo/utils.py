"""
Shared utility functions: crash-safe writes, hashing, path resolution.
"""

import hashlib
import os
import tempfile
from pathlib import Path
from typing import List, Union

from loguru import logger

from .config import data_dir


def resolve_path(path: Union[str, Path]) -> Path:
    """Relative paths are taken against FIBO_DATA_DIR (or the working directory)."""
    path = Path(path).expanduser()
    return path if path.is_absolute() else data_dir() / path


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """
    Write payload to a temp file in the target directory, fsync, then rename.

    A reader never observes a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def find_files_recursive(root_path: Path, pattern: str, max_results: int = 100) -> List[Path]:
    """
    Find files matching a glob pattern recursively under root_path.

    Args:
        root_path: Root directory to search
        pattern: File name pattern, e.g. "*.fibm"
        max_results: Maximum number of files to return (default: 100)

    Returns:
        Sorted list of file paths
    """
    found = []
    for path in Path(root_path).rglob(pattern):
        found.append(path)
        if len(found) >= max_results:
            logger.warning(f"Reached maximum of {max_results} files, stopping search")
            break
    return sorted(found)
