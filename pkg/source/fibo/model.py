"""
p_theta(x* | D): dataset encoder followed by the conditional spline flow,
plus the self-describing binary checkpoint format.

Checkpoint layout (little-endian):
    magic "FIBM" | version u32 | section count u32
    per section: kind u32 (0 = JSON, 1 = f64 array) | name length u32 | name (UTF-8)
        JSON:  length u64 | UTF-8 bytes
        array: ndim u32 | shape ndim x u64 | data (f64, C order)
"""

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger

from . import diffcore as dc
from . import encoder as enc
from . import flow as fl
from .config import (
    CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
    TARGET_CLAMP_EPS,
    FormatError,
    ShapeError,
)
from .funcprior import Dataset, PriorHyperparams
from .utils import atomic_write_bytes


Weights = Mapping[str, Union[np.ndarray, dc.Tensor]]

_ENCODER_PREFIX = "encoder/"
_FLOW_PREFIX = "flow/"


@dataclass(frozen=True)
class ModelConfig:
    encoder: enc.EncoderConfig
    flow: fl.FlowConfig

    def __post_init__(self):
        if self.encoder.dim != self.flow.dim:
            raise ShapeError(f"encoder dimension {self.encoder.dim} != flow dimension {self.flow.dim}")
        if self.encoder.context_dim != self.flow.context_dim:
            raise ShapeError(
                f"encoder context {self.encoder.context_dim} != flow context {self.flow.context_dim}"
            )

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @classmethod
    def for_dimension(cls, dim: int, attention: bool = False) -> "ModelConfig":
        encoder = enc.EncoderConfig.for_dimension(dim, attention=attention)
        return cls(encoder=encoder, flow=fl.FlowConfig.for_dimension(dim, encoder.context_dim))

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "flow": self.flow.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            encoder=enc.EncoderConfig.from_dict(data["encoder"]),
            flow=fl.FlowConfig.from_dict(data["flow"]),
        )


def clamp_targets(x: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64), TARGET_CLAMP_EPS, 1.0 - TARGET_CLAMP_EPS)


def split_weights(weights: Weights) -> tuple[dict, dict]:
    """Flat 'encoder/...' and 'flow/...' names to the two sub-dictionaries."""
    encoder_weights, flow_weights = {}, {}
    for name, value in weights.items():
        if name.startswith(_ENCODER_PREFIX):
            encoder_weights[name[len(_ENCODER_PREFIX):]] = value
        elif name.startswith(_FLOW_PREFIX):
            flow_weights[name[len(_FLOW_PREFIX):]] = value
        else:
            raise KeyError(f"unknown weight name {name}")
    return encoder_weights, flow_weights


def log_prob_batch(
    config: ModelConfig,
    weights: Weights,
    datasets: Sequence[Dataset],
    x_star: np.ndarray,
    blind_context: bool = False,
) -> dc.Tensor:
    """
    log p_theta(x*_b | D_b) for a batch, shape (B,).

    x* is clamped to [eps, 1-eps]. With blind_context the flow gets a zero
    context, i.e. the model ignores D.
    """
    encoder_weights, flow_weights = split_weights(weights)
    x_star = clamp_targets(np.atleast_2d(x_star))
    if x_star.shape != (len(datasets), config.dim):
        raise ShapeError(f"expected x* of shape ({len(datasets)}, {config.dim}), got {x_star.shape}")
    if blind_context:
        context = dc.constant(np.zeros((len(datasets), config.encoder.context_dim)))
    else:
        context = enc.encode_batch(config.encoder, encoder_weights, datasets)
    return fl.log_prob_batch(config.flow, flow_weights, x_star, context)


@dataclass
class FiboModel:
    """Configuration plus flat weight dictionary ('encoder/W1', 'flow/b0.p0.W2', ...)."""
    config: ModelConfig
    weights: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.config.dim

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "FiboModel":
        rng = np.random.default_rng(seed)
        weights = {}
        for name, value in enc.init_encoder(config.encoder, rng).items():
            weights[_ENCODER_PREFIX + name] = value
        for name, value in fl.init_flow(config.flow, rng).items():
            weights[_FLOW_PREFIX + name] = value
        return cls(config, weights)

    def copy(self) -> "FiboModel":
        return FiboModel(self.config, {k: v.copy() for k, v in self.weights.items()})

    @property
    def encoder_params(self) -> enc.EncoderParams:
        return enc.EncoderParams(self.config.encoder, split_weights(self.weights)[0])

    @property
    def flow_params(self) -> fl.FlowParams:
        return fl.FlowParams(self.config.flow, split_weights(self.weights)[1])

    def encode(self, D: Dataset) -> np.ndarray:
        return enc.encode(self.encoder_params, D)

    def log_prob_batch(self, datasets: Sequence[Dataset], x_star: np.ndarray, blind_context: bool = False) -> np.ndarray:
        return log_prob_batch(self.config, self.weights, datasets, x_star, blind_context).numpy().copy()

    def sample(self, D: Dataset, q: int, rng: np.random.Generator) -> np.ndarray:
        return fl.sample(self.flow_params, self.encode(D), q, rng)


@dataclass
class Checkpoint:
    """
    Trained model plus everything needed to interpret it without outside files.

    metadata keys: corpus_sha256, seed, train_nll, val_nll, epochs_completed,
    train_config; free-form additions are preserved.
    """
    model: FiboModel
    prior: Optional[PriorHyperparams] = None
    metadata: dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @property
    def dim(self) -> int:
        return self.model.dim


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------

_KIND_JSON = 0
_KIND_ARRAY = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _write_name(buffer: io.BytesIO, kind: int, name: str) -> None:
    encoded = name.encode("utf-8")
    buffer.write(_U32.pack(kind))
    buffer.write(_U32.pack(len(encoded)))
    buffer.write(encoded)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = {
        "d": checkpoint.dim,
        "model": checkpoint.model.config.to_dict(),
        "prior": checkpoint.prior.to_dict() if checkpoint.prior is not None else None,
        "metadata": checkpoint.metadata,
    }
    names = sorted(checkpoint.model.weights)
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(_U32.pack(checkpoint.format_version))
    buffer.write(_U32.pack(1 + len(names)))

    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    _write_name(buffer, _KIND_JSON, "header")
    buffer.write(_U64.pack(len(payload)))
    buffer.write(payload)

    for name in names:
        array = np.ascontiguousarray(checkpoint.model.weights[name], dtype="<f8")
        _write_name(buffer, _KIND_ARRAY, name)
        buffer.write(_U32.pack(array.ndim))
        for extent in array.shape:
            buffer.write(_U64.pack(extent))
        buffer.write(array.tobytes())
    return buffer.getvalue()


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """
    Raises:
        FormatError: bad magic, unsupported version, truncation, unknown section kind
    """
    view = memoryview(payload)
    offset = 0

    def take(nbytes: int) -> memoryview:
        nonlocal offset
        if offset + nbytes > len(view):
            raise FormatError(f"checkpoint is truncated at byte {offset}")
        chunk = view[offset:offset + nbytes]
        offset += nbytes
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = _U32.unpack(take(4))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    (sections,) = _U32.unpack(take(4))

    header = None
    weights: dict[str, np.ndarray] = {}
    for _ in range(sections):
        (kind,) = _U32.unpack(take(4))
        (name_len,) = _U32.unpack(take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if kind == _KIND_JSON:
            (length,) = _U64.unpack(take(8))
            document = json.loads(bytes(take(length)).decode("utf-8"))
            if name == "header":
                header = document
        elif kind == _KIND_ARRAY:
            (ndim,) = _U32.unpack(take(4))
            shape = tuple(_U64.unpack(take(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            weights[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        else:
            raise FormatError(f"unknown section kind {kind} for section {name!r}")
    if offset != len(view):
        raise FormatError(f"{len(view) - offset} trailing bytes after {sections} sections")
    if header is None:
        raise FormatError("checkpoint has no header section")

    config = ModelConfig.from_dict(header["model"])
    expected = set(FiboModel.initialize(config, 0).weights)
    if set(weights) != expected:
        missing = sorted(expected - set(weights))
        extra = sorted(set(weights) - expected)
        raise FormatError(f"checkpoint weights do not match its config (missing {missing[:5]}, extra {extra[:5]})")
    prior = PriorHyperparams.from_dict(header["prior"]) if header.get("prior") else None
    return Checkpoint(
        model=FiboModel(config, weights),
        prior=prior,
        metadata=header.get("metadata", {}),
        format_version=version,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(checkpoint))
    logger.info(f"Wrote checkpoint (d={checkpoint.dim}) to {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    checkpoint = decode_checkpoint(Path(path).read_bytes())
    logger.debug(f"Loaded checkpoint (d={checkpoint.dim}) from {path}")
    return checkpoint


def peek_dimension(path: Path) -> int:
    """Dimension stored in a checkpoint header, without building the model."""
    return load_checkpoint(path).dim
