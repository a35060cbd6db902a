"""
Conditional autoregressive rational-quadratic spline flow on (0,1)^d.

The flow maps a latent z ~ N(0, I) to x in the open unit cube:

    x = sigmoid(T_{K-1}( ... T_0(z; c) ... ; c))

Every block T_k is autoregressive: the spline for dimension order[j] gets
its parameters from a small tanh network of the block outputs of the
dimensions before it in the order, plus the context vector. Density
evaluation (inverse direction) is parallel over dimensions, sampling
(forward direction) runs dimension by dimension.

Splines are monotone piecewise rational-quadratic on [-B, B] with identity
tails. With the conditioners' last layer at zero every spline is exactly
the identity.
"""

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Union

import numpy as np
from scipy import special

from . import diffcore as dc
from .config import (
    CONDITIONER_HIDDEN,
    FLOW_BLOCKS_HIGH_DIM,
    FLOW_BLOCKS_LOW_DIM,
    MIN_BIN_HEIGHT,
    MIN_BIN_WIDTH,
    MIN_DERIVATIVE,
    SPLINE_BINS,
    SPLINE_TAIL_BOUND,
    DomainError,
    ShapeError,
)


Weights = Mapping[str, Union[np.ndarray, dc.Tensor]]

# softplus(0); derivatives are scaled by it so a zero input maps to slope 1 exactly
_SOFTPLUS_ZERO = float(np.logaddexp(0.0, 0.0))
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowConfig:
    dim: int
    context_dim: int
    num_blocks: int
    hidden: int = CONDITIONER_HIDDEN
    bins: int = SPLINE_BINS
    tail_bound: float = SPLINE_TAIL_BOUND

    @property
    def param_count(self) -> int:
        """Unnormalized spline parameters per dimension: K widths, K heights, K-1 slopes."""
        return 3 * self.bins - 1

    def order(self, block: int) -> list[int]:
        """Natural order; for d >= 3 every odd block is reversed."""
        natural = list(range(self.dim))
        if self.dim >= 3 and block % 2 == 1:
            return natural[::-1]
        return natural

    @classmethod
    def for_dimension(cls, dim: int, context_dim: int) -> "FlowConfig":
        blocks = FLOW_BLOCKS_LOW_DIM if dim <= 2 else FLOW_BLOCKS_HIGH_DIM
        return cls(dim=dim, context_dim=context_dim, num_blocks=blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FlowConfig":
        return cls(**data)


@dataclass
class FlowParams:
    config: FlowConfig
    weights: dict[str, np.ndarray]


def _name(block: int, position: int, tensor: str) -> str:
    return f"b{block}.p{position}.{tensor}"


def init_flow(config: FlowConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """
    Conditioner weights; the output layer starts at zero so the flow is the identity.
    """
    weights = {}
    for block in range(config.num_blocks):
        for position in range(config.dim):
            fan_in = position + config.context_dim
            weights[_name(block, position, "W1")] = rng.standard_normal((fan_in, config.hidden)) / math.sqrt(fan_in)
            weights[_name(block, position, "b1")] = np.zeros(config.hidden)
            weights[_name(block, position, "W2")] = np.zeros((config.hidden, config.param_count))
            weights[_name(block, position, "b2")] = np.zeros(config.param_count)
    return weights


# ---------------------------------------------------------------------------
# Rational-quadratic spline
# ---------------------------------------------------------------------------

@dataclass
class _Knots:
    x: dc.Tensor        # (N, K+1) input knots
    y: dc.Tensor        # (N, K+1) output knots
    widths: dc.Tensor   # (N, K)
    heights: dc.Tensor  # (N, K)
    slopes: dc.Tensor   # (N, K+1) derivatives at the knots


def _cumulative(lengths: dc.Tensor, bound: float) -> dc.Tensor:
    """Knot positions from bin lengths; first and last knot pinned to -B and B."""
    n, bins = lengths.shape
    upper = np.triu(np.ones((bins, bins)))
    interior = dc.affine((lengths @ upper)[:, :bins - 1], 1.0, -bound)
    edge = np.full((n, 1), bound)
    return dc.concatenate([dc.constant(-edge), interior, dc.constant(edge)], axis=1)


def _knots_from_lengths(widths: dc.Tensor, heights: dc.Tensor, interior_slopes: dc.Tensor, bound: float) -> _Knots:
    n = widths.shape[0]
    x = _cumulative(widths, bound)
    y = _cumulative(heights, bound)
    ones = dc.constant(np.ones((n, 1)))
    slopes = dc.concatenate([ones, interior_slopes, ones], axis=1)
    return _Knots(
        x=x,
        y=y,
        widths=x[:, 1:] - x[:, :-1],
        heights=y[:, 1:] - y[:, :-1],
        slopes=slopes,
    )


def spline_knots(raw: dc.Tensor, bins: int, bound: float) -> _Knots:
    """
    Unnormalized parameters (N, 3K-1) to knots.

    widths, heights = min + (1 - K min) softmax(.), scaled to 2B;
    slopes = min + (1 - min) softplus(.) / softplus(0).
    """
    scale_w = (1.0 - bins * MIN_BIN_WIDTH) * 2.0 * bound
    scale_h = (1.0 - bins * MIN_BIN_HEIGHT) * 2.0 * bound
    widths = dc.affine(dc.softmax(raw[:, :bins], axis=-1), scale_w, MIN_BIN_WIDTH * 2.0 * bound)
    heights = dc.affine(dc.softmax(raw[:, bins:2 * bins], axis=-1), scale_h, MIN_BIN_HEIGHT * 2.0 * bound)
    slopes = dc.affine(dc.softplus(raw[:, 2 * bins:]) / _SOFTPLUS_ZERO, 1.0 - MIN_DERIVATIVE, MIN_DERIVATIVE)
    return _knots_from_lengths(widths, heights, slopes, bound)


def _bin_index(values: np.ndarray, knots: np.ndarray) -> np.ndarray:
    bins = knots.shape[1] - 1
    index = np.sum(values[:, None] >= knots, axis=1) - 1
    return np.clip(index, 0, bins - 1)[:, None]


def _select(t: dc.Tensor, index: np.ndarray) -> dc.Tensor:
    return dc.gather(t, index, axis=1).reshape(index.shape[0])


def rq_transform(
    inputs: Union[np.ndarray, dc.Tensor],
    knots: _Knots,
    bound: float,
    inverse: bool = False,
) -> tuple[dc.Tensor, dc.Tensor]:
    """
    Elementwise monotone spline, one parameter row per input.

    Args:
        inputs:  (N,) values
        knots:   spline knots for each input row
        bound:   tail bound B; inputs outside [-B, B] pass through unchanged
        inverse: apply the inverse map

    Returns:
        (outputs, log |d outputs / d inputs|), both (N,)
    """
    inputs = dc.as_tensor(inputs)
    n = inputs.shape[0]
    values = inputs.numpy()
    inside = (values >= -bound) & (values <= bound)
    zeros = dc.constant(np.zeros(n))
    safe = dc.where(inside, inputs, zeros)

    index = _bin_index(safe.numpy(), (knots.y if inverse else knots.x).numpy())
    x_k = _select(knots.x, index)
    y_k = _select(knots.y, index)
    w_k = _select(knots.widths, index)
    h_k = _select(knots.heights, index)
    d_k = _select(knots.slopes, index)
    d_k1 = _select(knots.slopes, index + 1)
    s_k = h_k / w_k
    curvature = d_k1 + d_k - 2.0 * s_k

    if inverse:
        offset = safe - y_k
        a = h_k * (s_k - d_k) + offset * curvature
        b = h_k * d_k - offset * curvature
        c = -(s_k * offset)
        discriminant = b * b - 4.0 * a * c
        discriminant = dc.where(discriminant.numpy() > 0.0, discriminant, zeros)
        theta = (2.0 * c) / (-b - dc.sqrt(discriminant))
        outputs = theta * w_k + x_k
    else:
        theta = (safe - x_k) / w_k
        numerator = s_k * theta * theta + d_k * theta * (1.0 - theta)

    one_minus = 1.0 - theta
    mixed = theta * one_minus
    denominator = s_k + curvature * mixed
    if not inverse:
        outputs = y_k + h_k * (numerator / denominator)
    slope = (s_k * s_k) * (d_k1 * theta * theta + 2.0 * s_k * mixed + d_k * one_minus * one_minus) \
        / (denominator * denominator)
    logabsdet = dc.log(slope)
    if inverse:
        logabsdet = -logabsdet

    return dc.where(inside, outputs, inputs), dc.where(inside, logabsdet, zeros)


def rq_spline(
    u: float,
    widths: np.ndarray,
    heights: np.ndarray,
    derivs: np.ndarray,
    tail_bound: float = SPLINE_TAIL_BOUND,
    inverse: bool = False,
) -> tuple[float, float]:
    """
    Scalar spline evaluation from normalized parameters.

    Args:
        u:          input value
        widths:     K positive bin widths summing to 2B
        heights:    K positive bin heights summing to 2B
        derivs:     K-1 positive interior knot derivatives (boundary slopes are 1)
        tail_bound: B
        inverse:    evaluate the inverse map instead

    Returns:
        (v, dv/du); for inverse=True the derivative of the inverse map.

    Raises:
        DomainError: non-positive or non-finite widths/heights/derivatives, or
                     widths/heights not summing to the interval length
    """
    widths = np.asarray(widths, dtype=np.float64).reshape(1, -1)
    heights = np.asarray(heights, dtype=np.float64).reshape(1, -1)
    derivs = np.asarray(derivs, dtype=np.float64).reshape(1, -1)
    bins = widths.shape[1]
    if heights.shape[1] != bins or derivs.shape[1] != bins - 1:
        raise ShapeError(f"rq_spline: expected K widths, K heights, K-1 derivatives, got "
                         f"{widths.shape[1]}, {heights.shape[1]}, {derivs.shape[1]}")
    for label, array in (("width", widths), ("height", heights), ("derivative", derivs)):
        if not np.all(np.isfinite(array)) or np.any(array <= 0.0):
            raise DomainError(f"rq_spline: every bin {label} must be positive and finite")
    for label, array in (("widths", widths), ("heights", heights)):
        if not math.isclose(float(array.sum()), 2.0 * tail_bound, rel_tol=1e-9):
            raise DomainError(f"rq_spline: {label} sum to {array.sum()}, expected {2.0 * tail_bound}")

    knots = _knots_from_lengths(dc.constant(widths), dc.constant(heights), dc.constant(derivs), tail_bound)
    out, logabsdet = rq_transform(np.array([float(u)]), knots, tail_bound, inverse=inverse)
    return out.item(), math.exp(logabsdet.item())


# ---------------------------------------------------------------------------
# Autoregressive blocks
# ---------------------------------------------------------------------------

def _conditioner(
    config: FlowConfig,
    weights: Weights,
    block: int,
    position: int,
    preceding: list[dc.Tensor],
    context: dc.Tensor,
) -> dc.Tensor:
    n = context.shape[0]
    parts = [col.reshape(n, 1) for col in preceding] + [context]
    inputs = dc.concatenate(parts, axis=1) if len(parts) > 1 else context
    hidden = dc.tanh(inputs @ weights[_name(block, position, "W1")] + weights[_name(block, position, "b1")])
    return hidden @ weights[_name(block, position, "W2")] + weights[_name(block, position, "b2")]


def _block(
    config: FlowConfig,
    weights: Weights,
    block: int,
    columns: list[dc.Tensor],
    context: dc.Tensor,
    inverse: bool,
) -> tuple[list[dc.Tensor], dc.Tensor]:
    """
    One autoregressive block. Forward: columns are block inputs, computed
    sequentially. Inverse: columns are block outputs, every conditioner
    already sees its final inputs.
    """
    order = config.order(block)
    result: list[Optional[dc.Tensor]] = [None] * config.dim
    logdet = None
    for position, dim in enumerate(order):
        source = columns if inverse else result
        preceding = [source[i] for i in order[:position]]
        raw = _conditioner(config, weights, block, position, preceding, context)
        knots = spline_knots(raw, config.bins, config.tail_bound)
        result[dim], ld = rq_transform(columns[dim], knots, config.tail_bound, inverse=inverse)
        logdet = ld if logdet is None else logdet + ld
    return result, logdet


def _check_inputs(config: FlowConfig, points: np.ndarray, context) -> tuple[np.ndarray, dc.Tensor]:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != config.dim:
        raise ShapeError(f"flow: expected points of shape (N, {config.dim}), got {points.shape}")
    context = dc.as_tensor(context)
    if context.shape != (points.shape[0], config.context_dim):
        raise ShapeError(
            f"flow: expected context of shape ({points.shape[0]}, {config.context_dim}), got {context.shape}"
        )
    return points, context


def forward_batch(config: FlowConfig, weights: Weights, z: np.ndarray, context) -> tuple[dc.Tensor, dc.Tensor]:
    """Latent (N, d) to unit-cube points (N, d) and forward log-determinants (N,)."""
    z, context = _check_inputs(config, z, context)
    n = z.shape[0]
    columns = [dc.constant(z[:, i]) for i in range(config.dim)]
    logdet = dc.constant(np.zeros(n))
    for block in range(config.num_blocks):
        columns, ld = _block(config, weights, block, columns, context, inverse=False)
        logdet = logdet + ld
    for col in columns:
        logdet = logdet + (dc.log_sigmoid(col) + dc.log_sigmoid(-col))
    y = dc.concatenate([col.reshape(n, 1) for col in columns], axis=1)
    return dc.sigmoid(y), logdet


def inverse_batch(config: FlowConfig, weights: Weights, x: np.ndarray, context) -> tuple[dc.Tensor, dc.Tensor]:
    """
    Unit-cube points (N, d) to latents (N, d) and inverse log-determinants (N,).

    Raises:
        DomainError: a coordinate is not strictly inside (0, 1)
    """
    x, context = _check_inputs(config, x, context)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise DomainError("flow inverse: points must lie strictly inside (0,1)^d; clamp targets first")
    n = x.shape[0]
    y = special.logit(x)
    logdet = dc.constant(-np.sum(np.log(x) + np.log1p(-x), axis=1))
    columns = [dc.constant(y[:, i]) for i in range(config.dim)]
    for block in reversed(range(config.num_blocks)):
        columns, ld = _block(config, weights, block, columns, context, inverse=True)
        logdet = logdet + ld
    z = dc.concatenate([col.reshape(n, 1) for col in columns], axis=1)
    return z, logdet


def log_prob_batch(config: FlowConfig, weights: Weights, x: np.ndarray, context) -> dc.Tensor:
    """log N(z; 0, I) + inverse log-determinant for each row of x."""
    z, logdet = inverse_batch(config, weights, x, context)
    base = dc.affine((z * z).sum(axis=1), -0.5, -config.dim * _HALF_LOG_2PI)
    return base + logdet


# ---------------------------------------------------------------------------
# Single-point API
# ---------------------------------------------------------------------------

def _context_row(params: FlowParams, c: np.ndarray, rows: int = 1) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.shape[0] != params.config.context_dim:
        raise ShapeError(f"flow: context has length {c.shape[0]}, expected {params.config.context_dim}")
    if not np.all(np.isfinite(c)):
        raise DomainError("flow: context vector is not finite")
    return np.tile(c, (rows, 1))


def forward(params: FlowParams, z: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, float]:
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    x, logdet = forward_batch(params.config, params.weights, z, _context_row(params, c))
    return x.numpy()[0].copy(), logdet.item()


def inverse(params: FlowParams, x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    z, logdet = inverse_batch(params.config, params.weights, x, _context_row(params, c))
    return z.numpy()[0].copy(), logdet.item()


def log_prob(params: FlowParams, x: np.ndarray, c: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return log_prob_batch(params.config, params.weights, x, _context_row(params, c)).item()


def sample(params: FlowParams, c: np.ndarray, q: int, rng: np.random.Generator) -> np.ndarray:
    """q independent draws, shape (q, d), all strictly inside the unit cube."""
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    z = rng.standard_normal((q, params.config.dim))
    x, _ = forward_batch(params.config, params.weights, z, _context_row(params, c, q))
    return x.numpy().copy()
