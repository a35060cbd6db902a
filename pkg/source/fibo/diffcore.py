"""
Minimal reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: primitives applied while a Tape is active are recorded in
creation order, which is a valid topological order for the backward sweep.
Outside a tape, primitives only compute forward values (inference mode).

Broadcasting is restricted to scalars and leading axes; any other shape
coercion has to go through broadcast_to().
"""

import contextvars
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy import special

from .config import NonFiniteError, ShapeError


class Primitive(str, Enum):
    LEAF = "leaf"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    DIVIDE = "divide"
    MATMUL = "matmul"
    SUM = "sum"
    MEAN = "mean"
    BROADCAST = "broadcast"
    CONCATENATE = "concatenate"
    SLICE = "slice"
    GATHER = "gather"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    WHERE = "where"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    EXP = "exp"
    LOG = "log"
    COS = "cos"
    SIN = "sin"
    POWER = "power"
    SOFTMAX = "softmax"
    AFFINE = "affine"


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "fibo_active_tape", default=None
)
_OP_COUNTERS: contextvars.ContextVar[tuple] = contextvars.ContextVar(
    "fibo_op_counters", default=()
)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """
    Immutable float64 array plus the tape bookkeeping of the op that made it.

    Attributes:
        value:         read-only numpy array (row-major, float64)
        op:            Primitive that produced the tensor (LEAF for inputs)
        parents:       input tensors, only kept when the node is recorded
        attrs:         primitive attributes (axis, exponent, index, ...)
        requires_grad: True for variables and for recorded nodes depending on them
    """

    __slots__ = ("value", "op", "parents", "attrs", "requires_grad")
    __array_priority__ = 1000

    def __init__(
        self,
        value,
        op: Primitive = Primitive.LEAF,
        parents: tuple = (),
        attrs: Optional[dict] = None,
        requires_grad: bool = False,
    ):
        if op is Primitive.LEAF:
            array = np.array(value, dtype=np.float64)
        else:
            array = np.asarray(value, dtype=np.float64)
        array.flags.writeable = False
        self.value = array
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.requires_grad = requires_grad

    # --- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op.value})"

    # --- operators -----------------------------------------------------------

    def __add__(self, other):
        return apply_primitive(Primitive.ADD, [self, other])

    def __radd__(self, other):
        return apply_primitive(Primitive.ADD, [other, self])

    def __sub__(self, other):
        return apply_primitive(Primitive.SUBTRACT, [self, other])

    def __rsub__(self, other):
        return apply_primitive(Primitive.SUBTRACT, [other, self])

    def __mul__(self, other):
        return apply_primitive(Primitive.MULTIPLY, [self, other])

    def __rmul__(self, other):
        return apply_primitive(Primitive.MULTIPLY, [other, self])

    def __truediv__(self, other):
        return apply_primitive(Primitive.DIVIDE, [self, other])

    def __rtruediv__(self, other):
        return apply_primitive(Primitive.DIVIDE, [other, self])

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return apply_primitive(Primitive.MATMUL, [self, other])

    def __rmatmul__(self, other):
        return apply_primitive(Primitive.MATMUL, [other, self])

    def __pow__(self, exponent: float):
        return apply_primitive(Primitive.POWER, [self], exponent=float(exponent))

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return apply_primitive(Primitive.SLICE, [self], key=key)

    # --- method shortcuts ----------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return apply_primitive(Primitive.SUM, [self], axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return apply_primitive(Primitive.MEAN, [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive(Primitive.RESHAPE, [self], shape=tuple(shape))

    @property
    def T(self) -> "Tensor":
        return apply_primitive(Primitive.TRANSPOSE, [self])

    def tanh(self) -> "Tensor":
        return apply_primitive(Primitive.TANH, [self])

    def exp(self) -> "Tensor":
        return apply_primitive(Primitive.EXP, [self])

    def log(self) -> "Tensor":
        return apply_primitive(Primitive.LOG, [self])


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a non-tensor value as a constant; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value: ArrayLike) -> Tensor:
    """A leaf that never receives a gradient."""
    return Tensor(value.value if isinstance(value, Tensor) else value)


def variable(value: ArrayLike) -> Tensor:
    """A differentiable leaf recorded on the active tape."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise RuntimeError("variable() needs an active Tape")
    return tape.variable(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """
    Records differentiable nodes in creation order.

    Usage:
        with Tape() as tape:
            w = tape.variable(np.ones(3))
            loss = (w * w).sum()
        grads = tape.backward(loss)
        grads[w]  # -> array([2., 2., 2.])

    A tape is single-threaded. Tapes on disjoint data may run concurrently
    (the active tape is a context variable).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def variable(self, value: ArrayLike) -> Tensor:
        leaf = Tensor(value.value if isinstance(value, Tensor) else value,
                      requires_grad=True)
        self.nodes.append(leaf)
        return leaf

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.op is Primitive.LEAF]

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """
        Reverse sweep from a scalar root.

        Returns:
            Mapping from every variable on this tape to d(root)/d(variable).
            Variables the root does not depend on get a zero array.

        Raises:
            ShapeError: root is not of shape () or (1,).
        """
        if root.shape not in ((), (1,)):
            raise ShapeError(f"backward: root must have shape () or (1,), got {root.shape}")

        grads: dict[Tensor, np.ndarray] = {}
        if root.requires_grad:
            grads[root] = np.ones_like(root.value)

        for node in reversed(self.nodes):
            g = grads.get(node)
            if g is None or node.op is Primitive.LEAF:
                continue
            rule = _RULES[node.op]
            parent_values = [p.value for p in node.parents]
            parent_grads = rule.backward(g, parent_values, node.value, node.attrs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg

        return {
            leaf: grads.get(leaf, np.zeros_like(leaf.value))
            for leaf in self.leaves
        }


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backward sweep on the active tape."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise RuntimeError("backward() needs an active Tape")
    return tape.backward(root)


def recording() -> bool:
    return _ACTIVE_TAPE.get() is not None


@contextmanager
def count_ops() -> Iterator[Counter]:
    """
    Count primitive applications inside the block, keyed by primitive name.

    Counters nest; every enclosing counter sees the inner applications too.
    """
    counter: Counter = Counter()
    token = _OP_COUNTERS.set(_OP_COUNTERS.get() + (counter,))
    try:
        yield counter
    finally:
        _OP_COUNTERS.reset(token)


# ---------------------------------------------------------------------------
# Primitive rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Rule:
    check: Callable[[list[tuple], dict], None]
    forward: Callable[[list[np.ndarray], dict], np.ndarray]
    backward: Callable[[np.ndarray, list[np.ndarray], np.ndarray, dict], list]


def _is_scalar_shape(shape: tuple) -> bool:
    return shape == () or shape == (1,)


def _check_arity(kind: str, shapes: list[tuple], n: int) -> None:
    if len(shapes) != n:
        raise ShapeError(f"{kind}: expected {n} inputs, got {len(shapes)}")


def _check_elementwise(kind: str):
    def check(shapes: list[tuple], attrs: dict) -> None:
        _check_arity(kind, shapes, 2)
        a, b = shapes
        if a == b or _is_scalar_shape(a) or _is_scalar_shape(b):
            return
        small, large = (a, b) if len(a) < len(b) else (b, a)
        if len(small) < len(large) and large[len(large) - len(small):] == small:
            return
        raise ShapeError(
            f"{kind}: incompatible shapes {a} and {b} "
            f"(only scalar and leading-axis broadcasting is allowed)"
        )
    return check


def _check_unary(kind: str):
    def check(shapes: list[tuple], attrs: dict) -> None:
        _check_arity(kind, shapes, 1)
    return check


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape) and grad.shape != shape:
        return np.reshape(grad.sum(), shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _expand_reduced(grad: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(grad, ()), shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _check_reduce(kind: str):
    def check(shapes: list[tuple], attrs: dict) -> None:
        _check_arity(kind, shapes, 1)
        axis = attrs.get("axis")
        ndim = len(shapes[0])
        if axis is not None and not -ndim <= axis < ndim:
            raise ShapeError(f"{kind}: axis {axis} out of range for shape {shapes[0]}")
    return check


def _check_matmul(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("matmul", shapes, 2)
    a, b = shapes
    if len(b) != 2 or len(a) not in (1, 2) or a[-1] != b[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a} and {b}")


def _matmul_backward(g, inputs, out, attrs):
    a, b = inputs
    if a.ndim == 1:
        return [b @ g, np.outer(a, g)]
    return [g @ b.T, a.T @ g]


def _check_broadcast(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("broadcast", shapes, 1)
    try:
        np.broadcast_shapes(shapes[0], attrs["shape"])
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {shapes[0]} to {attrs['shape']}")
    if np.broadcast_shapes(shapes[0], attrs["shape"]) != tuple(attrs["shape"]):
        raise ShapeError(f"broadcast: cannot broadcast {shapes[0]} to {attrs['shape']}")


def _broadcast_backward(g, inputs, out, attrs):
    shape = inputs[0].shape
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return [g]


def _check_concat(shapes: list[tuple], attrs: dict) -> None:
    if not shapes:
        raise ShapeError("concatenate: needs at least one input")
    axis = attrs["axis"]
    ref = list(shapes[0])
    ndim = len(ref)
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concatenate: axis {axis} out of range for shapes {shapes}")
    ax = axis % ndim
    for s in shapes[1:]:
        if len(s) != ndim or any(s[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concatenate: mismatched shapes {shapes} along axis {axis}")


def _concat_backward(g, inputs, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _slice_backward(g, inputs, out, attrs):
    grad = np.zeros_like(inputs[0])
    grad[attrs["key"]] += g
    return [grad]


def _check_slice(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("slice", shapes, 1)
    for k in attrs["key"]:
        if not isinstance(k, (slice, int, np.integer)) and k is not Ellipsis and k is not None:
            raise ShapeError(f"slice: only basic indexing is supported, got {k!r}")


def _check_gather(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("gather", shapes, 1)
    index = attrs["index"]
    if index.ndim != len(shapes[0]):
        raise ShapeError(f"gather: index ndim {index.ndim} does not match input shape {shapes[0]}")


def _gather_backward(g, inputs, out, attrs):
    index, axis = attrs["index"], attrs["axis"]
    grad = np.zeros_like(inputs[0])
    grids = list(np.indices(index.shape, sparse=True))
    grids[axis % index.ndim] = index
    np.add.at(grad, tuple(grids), g)
    return [grad]


def _check_reshape(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("reshape", shapes, 1)
    if int(np.prod(shapes[0])) != int(np.prod(attrs["shape"])):
        raise ShapeError(f"reshape: cannot reshape {shapes[0]} to {attrs['shape']}")


def _check_transpose(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("transpose", shapes, 1)
    if len(shapes[0]) != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {shapes[0]}")


def _check_where(shapes: list[tuple], attrs: dict) -> None:
    _check_arity("where", shapes, 2)
    mask = attrs["mask"]
    if not (shapes[0] == shapes[1] == mask.shape):
        raise ShapeError(f"where: mask {mask.shape} and branches {shapes[0]}, {shapes[1]} must match")


def _softmax_forward(inputs, attrs):
    return special.softmax(inputs[0], axis=attrs["axis"])


def _softmax_backward(g, inputs, out, attrs):
    axis = attrs["axis"]
    return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]


def _power_forward(inputs, attrs):
    return np.power(inputs[0], attrs["exponent"])


def _power_backward(g, inputs, out, attrs):
    p = attrs["exponent"]
    return [g * p * np.power(inputs[0], p - 1.0)]


_RULES: dict[Primitive, _Rule] = {
    Primitive.ADD: _Rule(
        _check_elementwise("add"),
        lambda x, a: x[0] + x[1],
        lambda g, x, o, a: [_unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)],
    ),
    Primitive.SUBTRACT: _Rule(
        _check_elementwise("subtract"),
        lambda x, a: x[0] - x[1],
        lambda g, x, o, a: [_unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)],
    ),
    Primitive.MULTIPLY: _Rule(
        _check_elementwise("multiply"),
        lambda x, a: x[0] * x[1],
        lambda g, x, o, a: [_unbroadcast(g * x[1], x[0].shape),
                            _unbroadcast(g * x[0], x[1].shape)],
    ),
    Primitive.DIVIDE: _Rule(
        _check_elementwise("divide"),
        lambda x, a: x[0] / x[1],
        lambda g, x, o, a: [_unbroadcast(g / x[1], x[0].shape),
                            _unbroadcast(-g * x[0] / (x[1] * x[1]), x[1].shape)],
    ),
    Primitive.MATMUL: _Rule(_check_matmul, lambda x, a: x[0] @ x[1], _matmul_backward),
    Primitive.SUM: _Rule(
        _check_reduce("sum"),
        lambda x, a: np.sum(x[0], axis=a["axis"], keepdims=a["keepdims"]),
        lambda g, x, o, a: [_expand_reduced(g, x[0].shape, a["axis"], a["keepdims"]).copy()],
    ),
    Primitive.MEAN: _Rule(
        _check_reduce("mean"),
        lambda x, a: np.mean(x[0], axis=a["axis"], keepdims=a["keepdims"]),
        lambda g, x, o, a: [
            _expand_reduced(g, x[0].shape, a["axis"], a["keepdims"])
            / (x[0].size if a["axis"] is None else x[0].shape[a["axis"]])
        ],
    ),
    Primitive.BROADCAST: _Rule(
        _check_broadcast,
        lambda x, a: np.broadcast_to(x[0], a["shape"]).copy(),
        _broadcast_backward,
    ),
    Primitive.CONCATENATE: _Rule(
        _check_concat,
        lambda x, a: np.concatenate(x, axis=a["axis"]),
        _concat_backward,
    ),
    Primitive.SLICE: _Rule(_check_slice, lambda x, a: x[0][a["key"]].copy(), _slice_backward),
    Primitive.GATHER: _Rule(
        _check_gather,
        lambda x, a: np.take_along_axis(x[0], a["index"], axis=a["axis"]),
        _gather_backward,
    ),
    Primitive.RESHAPE: _Rule(
        _check_reshape,
        lambda x, a: np.reshape(x[0], a["shape"]).copy(),
        lambda g, x, o, a: [np.reshape(g, x[0].shape)],
    ),
    Primitive.TRANSPOSE: _Rule(
        _check_transpose,
        lambda x, a: np.ascontiguousarray(x[0].T),
        lambda g, x, o, a: [np.ascontiguousarray(g.T)],
    ),
    Primitive.WHERE: _Rule(
        _check_where,
        lambda x, a: np.where(a["mask"], x[0], x[1]),
        lambda g, x, o, a: [np.where(a["mask"], g, 0.0), np.where(a["mask"], 0.0, g)],
    ),
    Primitive.TANH: _Rule(
        _check_unary("tanh"), lambda x, a: np.tanh(x[0]),
        lambda g, x, o, a: [g * (1.0 - o * o)],
    ),
    Primitive.SIGMOID: _Rule(
        _check_unary("sigmoid"), lambda x, a: special.expit(x[0]),
        lambda g, x, o, a: [g * o * (1.0 - o)],
    ),
    Primitive.SOFTPLUS: _Rule(
        _check_unary("softplus"), lambda x, a: np.logaddexp(0.0, x[0]),
        lambda g, x, o, a: [g * special.expit(x[0])],
    ),
    Primitive.EXP: _Rule(
        _check_unary("exp"), lambda x, a: np.exp(x[0]),
        lambda g, x, o, a: [g * o],
    ),
    Primitive.LOG: _Rule(
        _check_unary("log"), lambda x, a: np.log(x[0]),
        lambda g, x, o, a: [g / x[0]],
    ),
    Primitive.COS: _Rule(
        _check_unary("cos"), lambda x, a: np.cos(x[0]),
        lambda g, x, o, a: [-g * np.sin(x[0])],
    ),
    Primitive.SIN: _Rule(
        _check_unary("sin"), lambda x, a: np.sin(x[0]),
        lambda g, x, o, a: [g * np.cos(x[0])],
    ),
    Primitive.POWER: _Rule(_check_unary("power"), _power_forward, _power_backward),
    Primitive.SOFTMAX: _Rule(_check_reduce("softmax"), _softmax_forward, _softmax_backward),
    Primitive.AFFINE: _Rule(
        _check_unary("affine"),
        lambda x, a: a["scale"] * x[0] + a["shift"],
        lambda g, x, o, a: [a["scale"] * g],
    ),
}


def apply_primitive(kind: Union[Primitive, str], inputs: Sequence[ArrayLike], **attrs) -> Tensor:
    """
    Apply a primitive, compute its forward value, and record it on the active tape.

    Args:
        kind:   Primitive (or its name)
        inputs: tensors or array-likes (the latter become constants)
        attrs:  primitive attributes, e.g. axis=, keepdims=, exponent=, index=

    Raises:
        ShapeError:     input shapes invalid for the primitive
        NonFiniteError: the forward value contains NaN or Inf
    """
    kind = Primitive(kind)
    if kind is Primitive.LEAF:
        raise ValueError("leaf is not an applicable primitive")
    rule = _RULES[kind]
    tensors = [as_tensor(x) for x in inputs]
    rule.check([t.shape for t in tensors], attrs)

    with np.errstate(all="ignore"):
        value = rule.forward([t.value for t in tensors], attrs)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(
            f"{kind.value}: non-finite output for input shapes {[t.shape for t in tensors]}"
        )

    for counter in _OP_COUNTERS.get():
        counter[kind.value] += 1

    tape = _ACTIVE_TAPE.get()
    requires = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor(value, kind, tuple(tensors) if requires else (), attrs, requires_grad=requires)
    if requires:
        tape.record(out)
    return out


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def tanh(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.TANH, [x])


def sigmoid(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.SIGMOID, [x])


def softplus(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.SOFTPLUS, [x])


def exp(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.EXP, [x])


def log(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.LOG, [x])


def cos(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.COS, [x])


def sin(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.SIN, [x])


def sqrt(x: ArrayLike) -> Tensor:
    return apply_primitive(Primitive.POWER, [x], exponent=0.5)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return apply_primitive(Primitive.SOFTMAX, [x], axis=axis)


def affine(x: ArrayLike, scale: float, shift: float) -> Tensor:
    return apply_primitive(Primitive.AFFINE, [x], scale=float(scale), shift=float(shift))


def log_sigmoid(x: ArrayLike) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x)."""
    return affine(softplus(affine(x, -1.0, 0.0)), -1.0, 0.0)


def broadcast_to(x: ArrayLike, shape: tuple) -> Tensor:
    return apply_primitive(Primitive.BROADCAST, [x], shape=tuple(shape))


def concatenate(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    return apply_primitive(Primitive.CONCATENATE, list(tensors), axis=axis)


def gather(x: ArrayLike, index: np.ndarray, axis: int = -1) -> Tensor:
    """np.take_along_axis with a constant integer index array."""
    return apply_primitive(Primitive.GATHER, [x], index=np.asarray(index, dtype=np.intp), axis=axis)


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from a where the constant boolean mask is set, else from b."""
    return apply_primitive(Primitive.WHERE, [a, b], mask=np.asarray(mask, dtype=bool))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-3,
    samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare reverse-mode gradients of a scalar function against central differences.

    The relative error of one component is |analytic - numeric| / max(|analytic|,
    |numeric|, floor); the floor keeps components that are zero in exact
    arithmetic from dominating through round-off.

    Args:
        fn:      function of len(inputs) tensors returning a scalar tensor
        inputs:  arrays at which to check
        h:       finite-difference step
        floor:   denominator floor
        samples: if set, check only this many randomly chosen components per input
        seed:    seed for the component choice

    Returns:
        Maximum relative error over the checked components.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)

    with Tape() as tape:
        leaves = [tape.variable(a) for a in arrays]
        root = fn(*leaves)
    grads = tape.backward(root)

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = grads[leaves[i]]
        size = base.size
        if samples is not None and samples < size:
            components = np.sort(rng.choice(size, size=samples, replace=False))
        else:
            components = range(size)
        for j in components:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            f_plus = fn(*[constant(a) for a in plus]).item()
            f_minus = fn(*[constant(a) for a in minus]).item()
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
