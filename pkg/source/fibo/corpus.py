"""
Corpus file format.

Binary, little-endian:
    magic "FIBC" | version u32 | d u32 | count u64
    per record: x* (d x f64) | y* f64 | n u32 | n x (d x f64 + f64)
    prior: length u32 | UTF-8 JSON of the generating PriorHyperparams
"""

import io
import json
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from .config import CORPUS_FORMAT_VERSION, CORPUS_MAGIC, FormatError
from .funcprior import Corpus, Dataset, PriorHyperparams, TrainingPair
from .utils import atomic_write_bytes, atomic_write_text, sha256_bytes, sha256_file


_HEADER = struct.Struct("<4sIIQ")
_RECORD_COUNT = struct.Struct("<I")
_PRIOR_LENGTH = struct.Struct("<I")
_F8 = np.dtype("<f8")


def encode_corpus(corpus: Corpus) -> bytes:
    """Serialize a corpus to the binary layout."""
    d = corpus.dim
    buffer = io.BytesIO()
    buffer.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_FORMAT_VERSION, d, len(corpus.pairs)))
    for index, pair in enumerate(corpus.pairs):
        x_star = np.asarray(pair.x_star, dtype=_F8).reshape(-1)
        if x_star.shape[0] != d or pair.dataset.dim != d:
            raise FormatError(f"record {index} has dimension {x_star.shape[0]}/{pair.dataset.dim}, corpus has {d}")
        buffer.write(x_star.tobytes())
        buffer.write(np.asarray([pair.y_star], dtype=_F8).tobytes())
        buffer.write(_RECORD_COUNT.pack(len(pair.dataset)))
        rows = np.hstack([pair.dataset.X, pair.dataset.y[:, None]]).astype(_F8)
        buffer.write(np.ascontiguousarray(rows).tobytes())
    prior = json.dumps(corpus.hp.to_dict(), sort_keys=True).encode("utf-8")
    buffer.write(_PRIOR_LENGTH.pack(len(prior)))
    buffer.write(prior)
    return buffer.getvalue()


def decode_corpus(payload: bytes) -> Corpus:
    """
    Parse the binary layout.

    Raises:
        FormatError: bad magic, unsupported version, truncation, trailing bytes
                     or a prior block that does not match the header
    """
    if len(payload) < _HEADER.size:
        raise FormatError("corpus file is truncated (no header)")
    magic, version, d, count = _HEADER.unpack_from(payload, 0)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"not a corpus file (magic {magic!r})")
    if version != CORPUS_FORMAT_VERSION:
        raise FormatError(f"unsupported corpus format version {version}")
    if d < 1:
        raise FormatError(f"invalid corpus dimension {d}")
    offset = _HEADER.size
    pairs = []

    def take(nbytes: int) -> memoryview:
        nonlocal offset
        if offset + nbytes > len(payload):
            raise FormatError(f"corpus file is truncated at byte {offset} (record {len(pairs)})")
        view = memoryview(payload)[offset:offset + nbytes]
        offset += nbytes
        return view

    for _ in range(count):
        x_star = np.frombuffer(take(8 * d), dtype=_F8).copy()
        y_star = float(np.frombuffer(take(8), dtype=_F8)[0])
        (n,) = _RECORD_COUNT.unpack(take(_RECORD_COUNT.size))
        rows = np.frombuffer(take(8 * n * (d + 1)), dtype=_F8).reshape(n, d + 1).copy()
        pairs.append(TrainingPair(x_star=x_star, dataset=Dataset(rows[:, :d], rows[:, d]), y_star=y_star))

    (length,) = _PRIOR_LENGTH.unpack(take(_PRIOR_LENGTH.size))
    hp = _prior_from_json(bytes(take(length)), d)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after the prior block")
    return Corpus(hp=hp, pairs=pairs)


def _prior_from_json(raw: bytes, d: int) -> PriorHyperparams:
    try:
        hp = PriorHyperparams.from_dict(json.loads(raw.decode("utf-8")))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as err:
        raise FormatError(f"unreadable prior block: {err}") from err
    if hp.dim != d:
        raise FormatError(f"corpus dimension {d} does not match prior dimension {hp.dim}")
    return hp


def save_corpus(corpus: Corpus, path: Path) -> str:
    """Write the corpus atomically and return its sha256 digest."""
    payload = encode_corpus(corpus)
    atomic_write_bytes(Path(path), payload)
    digest = sha256_bytes(payload)
    logger.info(f"Wrote corpus with {len(corpus)} pairs (d={corpus.dim}) to {path}")
    return digest


def load_corpus(path: Path) -> Corpus:
    payload = Path(path).read_bytes()
    corpus = decode_corpus(payload)
    logger.debug(f"Loaded corpus with {len(corpus)} pairs (d={corpus.dim}) from {path}")
    return corpus


def corpus_digest(path: Path) -> str:
    """sha256 of the corpus file as stored in checkpoint metadata."""
    return sha256_file(Path(path))


def export_jsonl(corpus: Corpus, path: Path) -> None:
    """Debug mirror: one JSON object per record with the same fields as the binary file."""
    lines = [json.dumps({"format": "fibo-corpus", "version": CORPUS_FORMAT_VERSION,
                         "d": corpus.dim, "count": len(corpus), "prior": corpus.hp.to_dict()})]
    for pair in corpus.pairs:
        lines.append(json.dumps({
            "x_star": [float(v) for v in pair.x_star],
            "y_star": float(pair.y_star),
            "n": len(pair.dataset),
            "X": pair.dataset.X.tolist(),
            "y": pair.dataset.y.tolist(),
        }))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
    logger.info(f"Wrote JSON-lines corpus mirror to {path}")


def import_jsonl(path: Path) -> Corpus:
    """Read a JSON-lines mirror back into a corpus."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise FormatError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != "fibo-corpus":
        raise FormatError(f"{path} is not a JSON-lines corpus mirror")
    d = int(header["d"])
    if "prior" not in header:
        raise FormatError(f"{path} has no prior in its header line")
    hp = _prior_from_json(json.dumps(header["prior"]).encode("utf-8"), d)
    pairs = []
    for line in lines[1:]:
        record = json.loads(line)
        X = np.asarray(record["X"], dtype=np.float64).reshape(-1, d)
        pairs.append(TrainingPair(
            x_star=np.asarray(record["x_star"], dtype=np.float64),
            dataset=Dataset(X, np.asarray(record["y"], dtype=np.float64)),
            y_star=float(record["y_star"]),
        ))
    if len(pairs) != int(header["count"]):
        raise FormatError(f"header announces {header['count']} records, found {len(pairs)}")
    return Corpus(hp=hp, pairs=pairs)
