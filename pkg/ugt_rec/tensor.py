# Dense f64 tensors with a reverse-mode differentiation tape.
# Every projection, attention map, propagation step and loss in the
# recommender is built from the primitive ops in this file.

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, Sequence[float], float, int]

# Taping is switched off inside `no_grad()`; a ContextVar keeps the switch
# private to the thread (or task) that set it.
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("ugt_grad_enabled", default=True)
_debug_checks = False


def set_debug(enabled: bool) -> None:
    """Turn the NaN/Inf guard on forward outputs on or off."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape (evaluation passes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


# =============================================================================
# TAPE AND TENSOR
# =============================================================================

@dataclass
class TapeNode:
    """One recorded op: its kind, its inputs, and the closure that maps the
    output gradient to input gradients (activations live in the closure)."""
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = field(repr=False)


class Tensor:
    """Dense row-major array of 64-bit floats that can take part in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    # -- views onto the storage ------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major copy of the stored values."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape))


def _make(
    out: np.ndarray,
    op: str,
    inputs: Tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    result = Tensor(out)
    if _debug_checks:
        assert np.all(np.isfinite(result.data)), f"non-finite output from {op}"
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = TapeNode(op=op, inputs=inputs, backward=backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# =============================================================================
# ELEMENTWISE ARITHMETIC
# =============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _make(x.data * cdf, "gelu", (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    # exp only ever sees a non-positive argument
    t = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log σ(x) = −log(1 + e^(−x)), finite for any finite x."""
    out = -np.logaddexp(0.0, -x.data)
    t = np.exp(-np.abs(x.data))
    complement = np.where(x.data >= 0, t / (1.0 + t), 1.0 / (1.0 + t))   # σ(−x)
    return _make(out, "log_sigmoid", (x,), lambda g: (g * complement,))


# =============================================================================
# LINEAR ALGEBRA AND SHAPE OPS
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A·B over the last two axes.

    Both operands may carry the same leading batch axes, or B may be a plain
    matrix shared by every batch entry (its gradient is then summed over the
    batch).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g: np.ndarray):
        grad_a = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            grad_b = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(A, -1, -2) @ g
        return grad_a, grad_b

    return _make(A @ B, "matmul", (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2).copy(), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape)).copy()
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shapes disagree: {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tensors, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    """Cut `x` into consecutive pieces of the given sizes along `axis`."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    pieces: List[Tensor] = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g: np.ndarray, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(_make(x.data[index].copy(), "split", (x,), backward))
        start += size
    return pieces


def gather(table: Tensor, indices: Union[np.ndarray, Sequence[int]], axis: int = 0) -> Tensor:
    """Embedding lookup: pick entries of `table` along `axis`."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim > 1 and axis != 0:
        raise ContractError("multi-dimensional gather indices are only supported along axis 0")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[axis]):
        raise ContractError(f"gather index out of range for axis of length {table.shape[axis]}")
    out = np.take(table.data, idx, axis=axis)

    def backward(g: np.ndarray):
        full = np.zeros_like(table.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (full,)

    return _make(out, "gather", (table,), backward)


# =============================================================================
# REDUCTIONS AND NORMALISATIONS
# =============================================================================

def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """gamma ⊙ (x − mean)/sqrt(var + eps) + beta over the last axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dimension {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g: np.ndarray):
        gx = g * gamma.data
        grad_x = inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return grad_x, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), backward)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def backward(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, x.data / safe, 0.0) * g,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, "l2_norm", (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ‖x‖ along `axis`; an all-zero slice maps to zeros."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, x.data / safe, 0.0)

    def backward(g: np.ndarray):
        radial = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(norm > 0, (g - out * radial) / safe, 0.0),)

    return _make(out, "l2_normalize", (x,), backward)


# =============================================================================
# BACKWARD PASS
# =============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill `.grad` of every reachable requires_grad leaf with d(loss)/d(leaf).

    Gradients add up over repeated uses of a tensor and over repeated calls;
    call `zero_grad` on the leaves between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# =============================================================================
# FINITE-DIFFERENCE GRADIENT CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of a scalar `f(*x)` with central differences.

    How it works:
    1. Run f once, backprop, and collect the analytic gradient of every input.
    2. Nudge each coordinate by ±h in place and rerun f for (f₊ − f₋)/(2h).
    3. Relative error per coordinate is |a − n| / max(|a|, |n|, floor).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"finite-difference step must lie in [1e-6, 1e-3], got {h}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = np.concatenate(
        [(t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in inputs]
    )

    numeric_parts = []
    with no_grad():
        for t in inputs:
            flat = t.data.reshape(-1)
            part = np.empty(flat.size)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + h
                plus = f(*inputs).item()
                flat[k] = original - h
                minus = f(*inputs).item()
                flat[k] = original
                part[k] = (plus - minus) / (2.0 * h)
            numeric_parts.append(part)
    numeric = np.concatenate(numeric_parts) if numeric_parts else np.zeros(0)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        rel_errors=rel,
        analytic=analytic,
        numeric=numeric,
        tolerance=tol,
    )
