"""Dense tensors with define-by-run reverse-mode differentiation.

Every public operation returns a new :class:`Tensor`. When a :class:`GradTape`
is active and at least one input requires gradients, the operation is
appended to the tape together with its vector-Jacobian product, so
``GradTape.backward`` can walk the recording in reverse.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w]
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "NORM_EPS",
    "DimensionError",
    "IndivisibleSplitError",
    "Tensor",
    "GradTape",
    "backward",
    "finite_diff_check",
    "set_default_dtype",
    "get_default_dtype",
    "as_tensor",
    "matmul",
    "column_norm",
    "split_cols",
    "concat_cols",
    "transpose",
    "reshape",
    "tensor_sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "elu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sliding_windows",
    "clamp_min",
]

NORM_EPS = 1e-12

_DEFAULT_DTYPE = np.float64
_state = threading.local()


class DimensionError(ValueError):
    """Operand extents do not conform."""


class IndivisibleSplitError(ValueError):
    """A length cannot be split into equal contiguous parts."""

    def __init__(self, length: int, parts: int, what: str = "columns"):
        self.length = length
        self.parts = parts
        super().__init__(f"cannot split {length} {what} into {parts} equal parts")


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An immutable dense array with an optional gradient requirement.

    ``data`` is a read-only numpy array. Parameters are updated by rebinding
    ``data`` to a fresh array, never by writing into the old one, so tensors
    already captured on a tape keep the values they were recorded with.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        floating = isinstance(data, np.ndarray) and data.dtype in (np.float64, np.float32)
        arr = np.array(data, dtype=None if floating else _DEFAULT_DTYPE, copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=self._data.dtype, copy=True)
        if arr.shape != self._data.shape:
            raise DimensionError(f"cannot rebind {self._data.shape} tensor to {arr.shape}")
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` with the scalar loss. A tape belongs to the thread that
    opened it.
    """

    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every requires-grad leaf on the tape.

        Returns a mapping from leaf tensor to gradient array. Leaf ``.grad``
        attributes are accumulated as well.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        seen: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = self.grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                seen[key] = inp
                if key in self.grads:
                    self.grads[key] = self.grads[key] + gi
                else:
                    self.grads[key] = gi
        leaves = {}
        for key, t in seen.items():
            if key in produced or not t.requires_grad:
                continue
            g = self.grads[key]
            leaves[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
        return leaves


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _tape() -> GradTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    # op results are fresh arrays, so skip the defensive copy
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data)
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(_DEFAULT_DTYPE)
    arr.flags.writeable = False
    out._data = arr
    out.requires_grad = requires_grad
    out.name = None
    out.grad = None
    return out


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = _wrap(data, needs)
    if needs:
        tape = _tape()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    return _make(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg + 1.0),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    return _make(np.maximum(x, floor), (a,), lambda g: (g * (x >= floor),))


# ---------------------------------------------------------------------------
# reductions and shape


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got {a.shape}")
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batching over the leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), vjp)


def column_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every column: ``[..., p, q] -> [..., 1, q]``.

    Zero columns give 0 with a zero gradient; callers guard divisions.
    """
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"column_norm needs a matrix, got {a.shape}")
    norm = np.sqrt(np.sum(a.data * a.data, axis=-2, keepdims=True))

    def vjp(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * a.data / safe, 0.0),)

    return _make(norm, (a,), vjp)


def _take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), vjp)


def split_cols(a: Tensor, n: int) -> list[Tensor]:
    """Split the last axis into ``n`` contiguous equal blocks."""
    a = as_tensor(a)
    q = a.shape[-1]
    if n < 1 or q % n:
        raise IndivisibleSplitError(q, n)
    if n == 1:
        return [a]
    w = q // n
    return [_take_cols(a, i * w, (i + 1) * w) for i in range(n)]


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_cols row mismatch: {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _make(out, tuple(parts),
                 lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def sliding_windows(a: Tensor, width: int) -> Tensor:
    """All length-``width`` windows of the last axis: ``[..., T] -> [..., T-w+1, w]``."""
    t = a.shape[-1]
    if width < 1 or width > t:
        raise DimensionError(f"window {width} does not fit length {t}")
    out = sliding_window_view(a.data, width, axis=-1)
    steps = t - width + 1

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        for j in range(width):
            full[..., j:j + steps] += g[..., j]
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# composites with fused gradients


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    centered = a - mean(a, axis=axis, keepdims=True)
    var = mean(centered * centered, axis=axis, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], at, step: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients of ``f``.

    The relative error of each entry uses ``max(|analytic|, |numeric|, 1e-12)``
    as its denominator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(as_tensor(at).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with GradTape() as tape:
        y = f(x)
    if isinstance(y, Tensor) and y.requires_grad:
        analytic = tape.backward(y).get(x, np.zeros_like(base))
    else:
        analytic = np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = float(as_tensor(f(Tensor(plus.reshape(base.shape)))).data.sum())
        fm = float(as_tensor(f(Tensor(minus.reshape(base.shape)))).data.sum())
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
