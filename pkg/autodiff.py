"""
Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive computes its value eagerly with numpy. When a ComputationRecord
is active (see `recording()`) and the result depends on a trainable tensor, the
primitive appends itself, together with its backward rule, to that record.
`ComputationRecord.backward()` then replays the record once in reverse order.

Outside a record the primitives are plain value computations, which is what
evaluation and finite-difference checks use.

Also holds the ParameterSet container and the SGD-with-momentum optimizer.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's contract."""


class DomainError(ValueError):
    """Input values fall outside a primitive's domain (log of x<=0, division by 0)."""


class NonFiniteError(ArithmeticError):
    """A forward value, gradient or update contains NaN or Inf."""


class RecordError(RuntimeError):
    """Misuse of a ComputationRecord (no active record, record already consumed, non-scalar root)."""


_node_ids = itertools.count(1)


class Tensor:
    """Dense float64 value with an identity in the active computation record."""

    __slots__ = ("values", "requires_grad", "node_id", "name")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar over the primitives below.
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return divide(other, self)

    def __neg__(self) -> "Tensor":
        return multiply(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


@dataclass
class RecordedOp:
    name: str
    inputs: Tuple[Tensor, ...]
    output_id: int
    rule: BackwardRule


class ComputationRecord:
    """Ordered list of primitive applications for one forward/backward cycle."""

    def __init__(self) -> None:
        self.ops: List[RecordedOp] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.ops)

    def push(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule) -> None:
        if self.consumed:
            raise RecordError("cannot record into a consumed computation record")
        self.ops.append(RecordedOp(name, inputs, output.node_id, rule))

    def backward(self, root: Tensor, params: Optional["ParameterSet"] = None) -> Dict[str, Tensor]:
        """
        Accumulate d(root)/d(leaf) for every named trainable leaf.

        Args:
            root: scalar tensor produced while this record was active
            params: when given, every parameter appears in the result (zeros if untouched)

        Returns:
            Map from parameter name to gradient tensor
        """
        if self.consumed:
            raise RecordError("computation record already consumed")
        if root.values.size != 1:
            raise RecordError(f"backward root must be scalar, got shape {root.shape}")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
        leaves: Dict[int, Tensor] = {}
        if root.requires_grad and root.name is not None:
            leaves[root.node_id] = root

        for op in reversed(self.ops):
            upstream = grads.pop(op.output_id, None)
            if upstream is None:
                continue
            for tensor, grad in zip(op.inputs, op.rule(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(f"{op.name}: gradient shape {grad.shape} != input shape {tensor.shape}")
                if tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + grad
                else:
                    grads[tensor.node_id] = grad
                if tensor.name is not None:
                    leaves[tensor.node_id] = tensor

        result: Dict[str, Tensor] = {}
        for node_id, tensor in leaves.items():
            grad = grads.get(node_id)
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {tensor.name!r}")
            result[tensor.name] = Tensor(grad)

        if params is not None:
            for name, tensor in params.items():
                if name not in result:
                    result[name] = Tensor(np.zeros_like(tensor.values))
        # Release the closures (they hold forward intermediates).
        self.ops = []
        return result


_state = threading.local()


def active_record() -> Optional[ComputationRecord]:
    return getattr(_state, "record", None)


@contextlib.contextmanager
def recording() -> Iterator[ComputationRecord]:
    """Make a fresh ComputationRecord active for the current thread."""
    record = ComputationRecord()
    previous = active_record()
    _state.record = record
    try:
        yield record
    finally:
        _state.record = previous


def backward(root: Tensor, params: Optional["ParameterSet"] = None) -> Dict[str, Tensor]:
    record = active_record()
    if record is None:
        raise RecordError("backward() needs an active computation record")
    return record.backward(root, params)


# ---------------------------------------------------------------------------
# Primitive plumbing
# ---------------------------------------------------------------------------

def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(name: str, values: np.ndarray, inputs: Tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{name} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    record = active_record()
    if needs_grad and record is not None:
        record.push(name, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _normalize_axes(axis: Optional[Union[int, Sequence[int]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        normalized.append(ax % ndim)
    return tuple(sorted(normalized))


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _emit("subtract", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _emit("multiply", a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.values == 0.0):
        raise DomainError("divide: denominator contains zeros")

    def rule(g: np.ndarray):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * a.values / (b.values ** 2), b.shape))

    return _emit("divide", a.values / b.values, (a, b), rule)


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return multiply(a, a)


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch shapes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from exc

    def rule(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", values, (a, b), rule)


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 axes")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.values, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", values, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _emit("reshape", values, (a,), lambda g: (g.reshape(a.shape),))


def expand_dims(a: ArrayLike, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = list(a.shape)
    shape.insert(axis % (a.ndim + 1), 1)
    return reshape(a, shape)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum(a: ArrayLike, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def rule(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", a.values.sum(axis=axes, keepdims=keepdims), (a,), rule)


def mean(a: ArrayLike, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return multiply(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum over one axis. The subgradient goes to the first maximal index."""
    a = as_tensor(a)
    (ax,) = _normalize_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("max over an empty axis")
    index = np.expand_dims(np.argmax(a.values, axis=ax), ax)
    values = np.take_along_axis(a.values, index, axis=ax)
    if not keepdims:
        values = np.squeeze(values, axis=ax)

    def rule(g: np.ndarray):
        grad = np.zeros_like(a.values)
        g = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, index, g, axis=ax)
        return (grad,)

    return _emit("max", values, (a,), rule)


def maximum_zero(a: ArrayLike) -> Tensor:
    """Elementwise max(0, a) built from concat + max (ties route to the zero branch)."""
    a = as_tensor(a)
    stacked = concat([Tensor(np.zeros(a.shape + (1,))), expand_dims(a, -1)], axis=-1)
    return max(stacked, axis=-1)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    values = np.tanh(a.values)
    return _emit("tanh", values, (a,), lambda g: (g * (1.0 - values ** 2),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.values
    with np.errstate(over="ignore"):
        values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    return _emit("sigmoid", values, (a,), lambda g: (g * values * (1.0 - values),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        values = np.exp(a.values)
    return _emit("exp", values, (a,), lambda g: (g * values,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _emit("log", np.log(a.values), (a,), lambda g: (g / a.values,))


def log1p(a: ArrayLike) -> Tensor:
    return log(add(a, 1.0))


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------

def embedding(table: Tensor, indices: np.ndarray, padding_idx: Optional[int] = None) -> Tensor:
    """Row lookup; indices are integers and never differentiated. The padding row gets no gradient."""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError(f"embedding indices must be integers, got {indices.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table with {table.shape[0]} rows")

    def rule(g: np.ndarray):
        grad = np.zeros_like(table.values)
        np.add.at(grad, indices, g)
        if padding_idx is not None:
            grad[padding_idx] = 0.0
        return (grad,)

    return _emit("embedding", table.values[indices], (table,), rule)


def masked_fill(a: ArrayLike, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true with `value`; those entries pass no gradient."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
            raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {a.shape}")
    except ValueError as exc:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {a.shape}") from exc
    return _emit("masked_fill", np.where(mask, value, a.values), (a,),
                 lambda g: (np.where(mask, 0.0, g),))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """
    One-dimensional convolution over the position axis.

    Args:
        x: (batch, length, in_channels)
        weight: (window, in_channels, out_channels)
        bias: (out_channels,)
        padding: "same" keeps the length, "valid" drops window-1 positions

    Returns:
        (batch, out_length, out_channels)
    """
    if x.ndim != 3 or weight.ndim != 3 or bias.ndim != 1:
        raise ShapeError(f"conv1d expects x (B,L,C), weight (W,C,O), bias (O,); got {x.shape}, {weight.shape}, {bias.shape}")
    window, c_in, c_out = weight.shape
    if x.shape[2] != c_in or bias.shape[0] != c_out:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    if padding == "same":
        left = (window - 1) // 2
        right = window - 1 - left
    elif padding == "valid":
        left = right = 0
    else:
        raise ShapeError(f"conv1d: unknown padding {padding!r}")

    batch, length, _ = x.shape
    padded = np.pad(x.values, ((0, 0), (left, right), (0, 0)))
    out_len = padded.shape[1] - window + 1
    if out_len < 1:
        raise ShapeError(f"conv1d: window {window} longer than input length {length}")
    # (B, out_len, C, W) -> (B, out_len, W*C)
    windows = sliding_window_view(padded, window, axis=1).transpose(0, 1, 3, 2).reshape(batch, out_len, window * c_in)
    kernel = weight.values.reshape(window * c_in, c_out)
    values = windows @ kernel + bias.values

    def rule(g: np.ndarray):
        g_kernel = windows.reshape(-1, window * c_in).T @ g.reshape(-1, c_out)
        g_bias = g.sum(axis=(0, 1))
        g_windows = (g @ kernel.T).reshape(batch, out_len, window, c_in)
        g_padded = np.zeros_like(padded)
        for k in range(window):
            g_padded[:, k:k + out_len, :] += g_windows[:, :, k, :]
        return g_padded[:, left:left + length, :], g_kernel.reshape(weight.shape), g_bias

    return _emit("conv1d", values, (x, weight, bias), rule)


def l2_normalize(a: ArrayLike, eps: float = NORM_EPS) -> Tensor:
    """Divide each vector along the last axis by max(norm, eps); zero vectors stay zero."""
    a = as_tensor(a)
    norm = np.sqrt((a.values ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    values = a.values / denom

    def rule(g: np.ndarray):
        radial = np.where(norm > eps, values * (g * values).sum(axis=-1, keepdims=True), 0.0)
        return ((g - radial) / denom,)

    return _emit("l2_normalize", values, (a,), rule)


def cosine_matrix(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Row-wise cosine similarity of (..., m, n) and (..., p, n) into (..., m, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_matrix: feature sizes differ ({a.shape} vs {b.shape})")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def stop_gradient(a: ArrayLike) -> Tensor:
    """Identity forward, zero backward."""
    a = as_tensor(a)
    return Tensor(a.values, requires_grad=False)


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, values in (arrays or {}).items():
            self.add(name, values)

    def add(self, name: str, values: ArrayLike) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(values, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> List[str]:
        return sorted(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._tensors[name]) for name in self.names()]

    @property
    def size(self) -> int:
        return int(np.sum([t.values.size for t in self._tensors.values()], dtype=np.int64))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.items()}

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, values in arrays.items():
            tensor = self._tensors[name]
            values = np.asarray(values, dtype=np.float64)
            if values.shape != tensor.shape:
                raise ShapeError(f"assign {name!r}: shape {values.shape} != {tensor.shape}")
            tensor.values = values.copy()

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.snapshot())

    def flatten(self) -> np.ndarray:
        return self.flatten_map({name: t.values for name, t in self.items()})

    def flatten_map(self, mapping: Mapping[str, Union[Tensor, np.ndarray]]) -> np.ndarray:
        """Concatenate a per-parameter map in this set's name order."""
        chunks = []
        for name, tensor in self.items():
            values = mapping[name]
            values = values.values if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
            if values.shape != tensor.shape:
                raise ShapeError(f"flatten {name!r}: shape {values.shape} != {tensor.shape}")
            chunks.append(values.ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def unflatten(self, vector: np.ndarray) -> Dict[str, np.ndarray]:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeError(f"unflatten: expected vector of length {self.size}, got {vector.shape}")
        result, offset = {}, 0
        for name, tensor in self.items():
            count = tensor.values.size
            result[name] = vector[offset:offset + count].reshape(tensor.shape).copy()
            offset += count
        return result


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def optimizer_step(params: ParameterSet, grads: Mapping[str, Union[Tensor, np.ndarray]],
                   state: OptimizerState) -> ParameterSet:
    """SGD with momentum: v <- momentum*v + g; theta <- theta - lr*v."""
    missing = [name for name in params.names() if name not in grads]
    if missing:
        raise ValueError(f"gradients missing for parameters: {missing}")

    updates: Dict[str, np.ndarray] = {}
    velocities: Dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        grad = grads[name]
        grad = grad.values if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, parameter has {tensor.shape}")
        velocity = state.velocity.get(name)
        velocity = grad.copy() if velocity is None else state.momentum * velocity + grad
        updated = tensor.values - state.lr * velocity
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"non-finite update for parameter {name!r}")
        velocities[name] = velocity
        updates[name] = updated

    state.velocity.update(velocities)
    params.assign(updates)
    return params


def grad_check(fn: Callable[[ParameterSet], Tensor], params: ParameterSet, epsilon: float = 1e-5) -> float:
    """
    Compare autodiff gradients with central differences.

    Returns:
        max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    with recording() as record:
        analytic = record.backward(fn(params), params)

    worst = 0.0
    for name, tensor in params.items():
        base = tensor.values.copy()
        try:
            for index in np.ndindex(base.shape):
                shifted = base.copy()
                shifted[index] += epsilon
                tensor.values = shifted
                upper = fn(params).item()
                shifted[index] = base[index] - epsilon
                tensor.values = shifted
                lower = fn(params).item()
                numeric = (upper - lower) / (2.0 * epsilon)
                exact = float(analytic[name].values[index])
                if not (np.isfinite(numeric) and np.isfinite(exact)):
                    raise NonFiniteError(f"non-finite gradient at {name}{list(index)}")
                error = abs(exact - numeric) / np.max([1.0, abs(exact), abs(numeric)])
                worst = error if error > worst else worst
        finally:
            tensor.values = base
    return float(worst)
