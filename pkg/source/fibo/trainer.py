"""
Pretraining of p_theta(x* | D) by maximum likelihood on a prior corpus.

Adam with global-norm clipping and a cosine learning-rate schedule. Every
training pair is subsampled afresh each epoch; batch order and subsets are
determined by the config seed alone.
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NoReturn, Optional, Sequence

import numpy as np
from loguru import logger

from . import diffcore as dc
from .config import (
    ADAM_BETAS,
    ADAM_EPS,
    AUGMENT_MAX,
    AUGMENT_MIN,
    BATCH_SIZE,
    EPOCHS,
    GRAD_CLIP_NORM,
    LEARNING_RATE,
    VALIDATION_FRACTION,
    NonFiniteError,
    NonFiniteLossError,
    ShapeError,
    TrainingDivergedError,
)
from .funcprior import Corpus, TrainingPair
from .model import Checkpoint, FiboModel, ModelConfig, log_prob_batch, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    seed: int = 0
    augment_min: int = AUGMENT_MIN
    augment_max: int = AUGMENT_MAX
    validation_fraction: float = VALIDATION_FRACTION
    grad_clip: float = GRAD_CLIP_NORM
    attention: bool = False
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if not 1 <= self.augment_min <= self.augment_max:
            raise ValueError(f"need 1 <= augment_min <= augment_max, got {self.augment_min}, {self.augment_max}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


EpochCallback = Callable[[int, Checkpoint], None]


# ---------------------------------------------------------------------------
# Loss and augmentation
# ---------------------------------------------------------------------------

def _batch_arrays(batch: Sequence[TrainingPair]):
    return [pair.dataset for pair in batch], np.vstack([np.atleast_2d(pair.x_star) for pair in batch])


def _loss_tensor(model: FiboModel, weights, batch: Sequence[TrainingPair], blind_context: bool = False) -> dc.Tensor:
    """Mean NLL of the batch as a scalar tensor; locates the offending pair on failure."""
    datasets, x_star = _batch_arrays(batch)
    try:
        return -log_prob_batch(model.config, weights, datasets, x_star, blind_context).mean()
    except NonFiniteError as err:
        for index, pair in enumerate(batch):
            try:
                log_prob_batch(model.config, model.weights, [pair.dataset], pair.x_star[None, :], blind_context)
            except NonFiniteError:
                raise NonFiniteLossError(f"non-finite loss at batch pair {index}: {err}", pair_index=index) from err
        raise NonFiniteLossError(f"non-finite loss in batch: {err}", pair_index=-1) from err


def nll_loss(model: FiboModel, batch: Sequence[TrainingPair], blind_context: bool = False) -> float:
    """
    -(1/|batch|) sum log p_theta(x* | D) with x* clamped to [eps, 1-eps].

    Raises:
        ValueError:         empty batch
        NonFiniteLossError: a pair produced a non-finite value (pair_index names it)
    """
    if not batch:
        raise ValueError("nll_loss: batch is empty")
    return _loss_tensor(model, model.weights, batch, blind_context).item()


def loss_and_gradients(model: FiboModel, batch: Sequence[TrainingPair]) -> tuple[float, dict[str, np.ndarray]]:
    """Batch NLL and its gradient for every weight."""
    if not batch:
        raise ValueError("loss_and_gradients: batch is empty")
    with dc.Tape() as tape:
        variables = {name: tape.variable(value) for name, value in model.weights.items()}
        loss = _loss_tensor(model, variables, batch)
    grads = tape.backward(loss)
    return loss.item(), {name: grads[var] for name, var in variables.items()}


def augment(pair: TrainingPair, rng: np.random.Generator, n_lo: int, n_hi: int) -> TrainingPair:
    """
    Same x*, D replaced by a uniform random subset of size n ~ U{n_lo..n_hi}.

    Points keep their original order, so n = |D| returns an identical pair.

    Raises:
        ValueError: unless 1 <= n_lo <= n_hi <= |D|
    """
    size = len(pair.dataset)
    if n_hi > size:
        raise ValueError(f"augment: n_hi={n_hi} exceeds dataset size {size}")
    if not 1 <= n_lo <= n_hi:
        raise ValueError(f"augment: need 1 <= n_lo <= n_hi, got {n_lo}, {n_hi}")
    n = int(rng.integers(n_lo, n_hi + 1))
    index = np.sort(rng.choice(size, size=n, replace=False))
    return TrainingPair(x_star=pair.x_star, dataset=pair.dataset.subset(index), y_star=pair.y_star)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def cosine_rate(step: int, total_steps: int, initial: float) -> float:
    """Cosine decay from `initial` at step 0 to zero at the last step."""
    if total_steps <= 1:
        return initial
    return initial * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


class AdamOptimizer:
    """Adam without weight decay, applied in place to a weight dictionary."""

    def __init__(self, weights: dict[str, np.ndarray], betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(value) for name, value in weights.items()}
        self.v = {name: np.zeros_like(value) for name, value in weights.items()}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], rate: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            weights[name] = weights[name] - rate * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def split_corpus(pairs: Sequence[TrainingPair], fraction: float, rng: np.random.Generator):
    """Random (train, validation) split; validation gets round(fraction * N) pairs, at least one if N >= 2."""
    n = len(pairs)
    n_val = int(round(fraction * n))
    if fraction > 0.0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    perm = rng.permutation(n)
    validation = [pairs[i] for i in perm[:n_val]]
    training = [pairs[i] for i in perm[n_val:]]
    return training, validation


def evaluate_nll(model: FiboModel, pairs: Sequence[TrainingPair], batch_size: int, blind_context: bool = False) -> Optional[float]:
    """Mean NLL over `pairs` in fixed-size chunks, None for an empty list."""
    if not pairs:
        return None
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        total += nll_loss(model, chunk, blind_context) * len(chunk)
    return total / len(pairs)


def _make_checkpoint(model: FiboModel, corpus: Corpus, config: TrainConfig, metadata: dict) -> Checkpoint:
    return Checkpoint(
        model=model.copy(),
        prior=corpus.hp,
        metadata={"seed": config.seed, "train_config": config.to_dict(), **metadata},
    )


def train(
    corpus: Corpus,
    config: TrainConfig,
    corpus_sha256: Optional[str] = None,
    callback: Optional[EpochCallback] = None,
    model_config: Optional[ModelConfig] = None,
) -> Checkpoint:
    """
    Fit encoder and flow end to end by minimizing the mean NLL.

    Args:
        corpus:        training pairs
        config:        optimizer and schedule settings
        corpus_sha256: digest recorded in the checkpoint metadata
        callback:      called after every epoch with (epoch, checkpoint)
        model_config:  architecture override (defaults follow the dimension)

    Returns:
        Checkpoint with final train/validation NLL in its metadata

    Raises:
        ShapeError:            model and corpus dimensions differ
        TrainingDivergedError: loss or gradients became non-finite; the last
                               good checkpoint is attached (and saved when
                               config.checkpoint_path is set)
    """
    if len(corpus) == 0:
        raise ValueError("train: corpus is empty")
    if model_config is None:
        model_config = ModelConfig.for_dimension(corpus.dim, attention=config.attention)
    if model_config.dim != corpus.dim:
        raise ShapeError(f"model dimension {model_config.dim} does not match corpus dimension {corpus.dim}")

    rng = np.random.default_rng(config.seed)
    model = FiboModel.initialize(model_config, config.seed)
    training, validation = split_corpus(corpus.pairs, config.validation_fraction, rng)
    if not training:
        raise ValueError("train: no pairs left for training after the validation split")

    steps_per_epoch = math.ceil(len(training) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    optimizer = AdamOptimizer(model.weights)

    initial_val = evaluate_nll(model, validation, config.batch_size)
    base_metadata = {"corpus_sha256": corpus_sha256, "initial_val_nll": initial_val}
    logger.info(
        f"Training d={corpus.dim}: {len(training)} train / {len(validation)} validation pairs, "
        f"{config.epochs} epochs x {steps_per_epoch} steps"
    )
    if initial_val is not None:
        logger.info(f"Initial validation NLL {initial_val:.4f}")

    last_good = _make_checkpoint(model, corpus, config, {**base_metadata, "epochs_completed": 0})
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(training))
        epoch_losses = []
        for start in range(0, len(training), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                pair = training[i]
                size = len(pair.dataset)
                batch.append(augment(pair, rng, min(config.augment_min, size), min(config.augment_max, size)))

            rate = cosine_rate(step, total_steps, config.learning_rate)
            try:
                loss, grads = loss_and_gradients(model, batch)
            except NonFiniteLossError as err:
                _abort(last_good, config, f"epoch {epoch}, step {step}: {err}")
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                _abort(last_good, config, f"epoch {epoch}, step {step}: non-finite gradient")
            grads, norm = clip_global_norm(grads, config.grad_clip)
            optimizer.step(model.weights, grads, rate)
            epoch_losses.append(loss)
            logger.debug(f"step {step}: loss {loss:.4f}, grad norm {norm:.3f}, rate {rate:.2e}")
            step += 1

        val_nll = evaluate_nll(model, validation, config.batch_size)
        train_loss = float(np.mean(epoch_losses))
        logger.info(
            f"Epoch {epoch}/{config.epochs}: train NLL {train_loss:.4f}"
            + (f", validation NLL {val_nll:.4f}" if val_nll is not None else "")
        )
        last_good = _make_checkpoint(model, corpus, config, {
            **base_metadata, "epochs_completed": epoch, "train_nll": train_loss, "val_nll": val_nll,
        })
        if callback is not None:
            callback(epoch, last_good)

    final_train = evaluate_nll(model, training, config.batch_size)
    final_val = evaluate_nll(model, validation, config.batch_size)
    checkpoint = _make_checkpoint(model, corpus, config, {
        **base_metadata, "epochs_completed": config.epochs, "train_nll": final_train, "val_nll": final_val,
    })
    if config.checkpoint_path:
        save_checkpoint(checkpoint, Path(config.checkpoint_path))
    logger.success(
        f"Training complete: train NLL {final_train:.4f}"
        + (f", validation NLL {final_val:.4f}" if final_val is not None else "")
    )
    return checkpoint


def _abort(last_good: Checkpoint, config: TrainConfig, reason: str) -> NoReturn:
    logger.error(f"Training diverged ({reason}); keeping checkpoint from epoch {last_good.metadata['epochs_completed']}")
    if config.checkpoint_path:
        save_checkpoint(last_good, Path(config.checkpoint_path))
    raise TrainingDivergedError(f"training diverged: {reason}", checkpoint=last_good)
