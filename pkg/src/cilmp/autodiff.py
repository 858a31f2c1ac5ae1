"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation on tensors that require
gradients records its inputs and a backward closure on the output node.
``Tensor.backward()`` linearizes the graph into a :class:`Tape` (inputs
before outputs) and walks it once in reverse, accumulating gradients by
summation so shared subexpressions contribute along every path.

All values are 64-bit floats. Every documented operation validates that
its result is finite; overflow raises :class:`~cilmp.errors.EvaluationError`
instead of propagating NaN or infinity. Broadcasting is restricted to
scalar-with-tensor plus the explicit row-vector helpers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    FrozenParameterError,
    LabelError,
)

NORM_EPS = 1e-12


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A dense float64 array participating in the autodiff graph.

    ``frozen`` marks parameters excluded from optimization; a frozen tensor
    never requires gradients and optimizers refuse to touch it.
    """

    __slots__ = ("data", "requires_grad", "grad", "frozen", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.frozen:
            raise FrozenParameterError("gradient registered on a frozen parameter")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root, one visit per node."""
        if self.data.size != 1:
            raise DimensionError(f"backward() requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        tape = Tape.trace(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None:
                node._backward()
        for node in tape.nodes:
            if node.grad is not None:
                _ensure_finite(node.grad, "backward pass")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class Tape:
    """Linearized computation graph: every node's inputs precede it."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(nodes=order)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None], op: str) -> Tensor:
    out = Tensor(_ensure_finite(data, op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _scalar_shapes(a: Tensor, b: Tensor) -> bool:
    return a.size == 1 or b.size == 1


def _binary_shape_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not _scalar_shapes(a, b):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    """Collapse a gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "add")
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(a.shape, g))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(b.shape, g))

    out = _make(out_data, (a, b), backward, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "subtract")
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(a.shape, g))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(b.shape, -g))

    out = _make(out_data, (a, b), backward, "subtract")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; one operand may be a scalar."""
    _binary_shape_check(a, b, "hadamard")
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(a.shape, g * b.data))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(b.shape, g * a.data))

    out = _make(out_data, (a, b), backward, "hadamard")
    return out


hadamard = mul


def neg(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            a.accumulate_grad(-out.grad)

    out = _make(-a.data, (a,), backward, "negate")
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * s)

    out = _make(a.data * s, (a,), backward, "scale")
    return out


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: incompatible shapes {x.shape} and {v.shape}")

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g)
        if v.requires_grad:
            v.accumulate_grad(g.sum(axis=0))

    out = _make(x.data + v.data[None, :], (x, v), backward, "add_rowvec")
    return out


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of an n-by-d matrix elementwise by a length-d vector."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"mul_rowvec: incompatible shapes {x.shape} and {v.shape}")

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g * v.data[None, :])
        if v.requires_grad:
            v.accumulate_grad((g * x.data).sum(axis=0))

    out = _make(x.data * v.data[None, :], (x, v), backward, "mul_rowvec")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    out = _make(a.data @ b.data, (a, b), backward, "matmul")
    return out


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """Matrix-vector product: (n, d) @ (d,) -> (n,)."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: incompatible shapes {m.shape} and {v.shape}")

    def backward():
        g = out.grad
        if m.requires_grad:
            m.accumulate_grad(np.outer(g, v.data))
        if v.requires_grad:
            v.accumulate_grad(m.data.T @ g)

    out = _make(m.data @ v.data, (m, v), backward, "matvec")
    return out


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"dot: incompatible shapes {u.shape} and {v.shape}")

    def backward():
        g = out.grad
        if u.requires_grad:
            u.accumulate_grad(g * v.data)
        if v.requires_grad:
            v.accumulate_grad(g * u.data)

    out = _make(np.asarray(u.data @ v.data), (u, v), backward, "dot")
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad.T)

    out = _make(a.data.T.copy(), (a,), backward, "transpose")
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    out = _make(a.data.reshape(shape).copy(), (a,), backward, "reshape")
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].ndim
    if any(t.ndim != ref for t in tensors):
        raise DimensionError("concat: operands differ in rank")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    out = _make(data, tuple(tensors), backward, "concat")
    return out


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[key] = out.grad
            a.accumulate_grad(g)

    out = _make(data.copy(), (a,), backward, "slice")
    return out


def rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows by integer index (embedding lookup); duplicates accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2:
        raise DimensionError(f"rows: expected a matrix, got shape {a.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= a.shape[0]):
        raise LabelError(f"rows: index out of range for {a.shape[0]} rows")

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a.accumulate_grad(g)

    out = _make(a.data[idx].copy(), (a,), backward, "rows")
    return out


def tsum(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad.reshape(())))

    out = _make(np.asarray(a.data.sum()), (a,), backward, "sum")
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward():
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad.reshape(()) / n))

    out = _make(np.asarray(a.data.mean()), (a,), backward, "mean")
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise EvaluationError("log of a non-positive value")

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    out = _make(np.log(a.data), (a,), backward, "log")
    return out


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data)

    out = _make(data, (a,), backward, "exp")
    return out


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * (1.0 - out.data**2))

    out = _make(data, (a,), backward, "tanh")
    return out


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector to unit Euclidean norm, preserving direction."""
    if v.ndim != 1:
        raise DimensionError(f"l2_normalize: expected a vector, got shape {v.shape}")
    n = float(np.linalg.norm(v.data))
    if n <= NORM_EPS:
        raise DegenerateInputError(f"l2_normalize: norm {n} below {NORM_EPS}")
    y_data = v.data / n

    def backward():
        if v.requires_grad:
            g = out.grad
            v.accumulate_grad((g - out.data * float(out.data @ g)) / n)

    out = _make(y_data, (v,), backward, "l2_normalize")
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.ndim != 2 or gain.ndim != 1 or bias.ndim != 1:
        raise DimensionError("layer_norm: expected matrix input with vector gain/bias")
    if x.shape[1] != gain.shape[0] or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"layer_norm: width {x.shape[1]} vs gain {gain.shape} bias {bias.shape}")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data[None, :]
            dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv**3
            dmu = -(dxhat * inv).sum(axis=1, keepdims=True) + dvar * (-2.0 * xc).mean(axis=1, keepdims=True)
            x.accumulate_grad(dxhat * inv + dvar * 2.0 * xc / d + dmu / d)

    out = _make(xhat * gain.data[None, :] + bias.data[None, :], (x, gain, bias), backward, "layer_norm")
    return out


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction; ``mask`` marks allowed entries."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask shape {mask.shape} vs input {x.shape}")
        if not mask.any(axis=1).all():
            raise EvaluationError("softmax_rows: a row has no allowed entries")
        row_max = np.where(mask, x.data, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.minimum(x.data - row_max, 0.0)), 0.0)
    else:
        row_max = x.data.max(axis=1, keepdims=True)
        e = np.exp(x.data - row_max)
    y_data = e / e.sum(axis=1, keepdims=True)

    def backward():
        if x.requires_grad:
            g = out.grad
            inner = (g * out.data).sum(axis=1, keepdims=True)
            x.accumulate_grad(out.data * (g - inner))

    out = _make(y_data, (x,), backward, "softmax_rows")
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target entry of each row.

    Stabilized by per-row max subtraction so saturated logits stay exact.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected a matrix, got shape {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but targets shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise LabelError(f"softmax_cross_entropy: target outside [0, {c})")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    losses = lse - logits.data[np.arange(n), t]

    def backward():
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), t] -= 1.0
            logits.accumulate_grad(out.grad.reshape(()) * p / n)

    out = _make(np.asarray(losses.mean()), (logits,), backward, "softmax_cross_entropy")
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack length-d vectors into an (n, d) matrix."""
    return concat([reshape(v, (1, v.shape[0])) for v in vectors], axis=0)


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar loss from the current parameter values;
    the error for each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step size {h} outside [1e-6, 1e-4]")
    for p in params:
        p.data = np.ascontiguousarray(p.data)  # reshape below must alias, not copy
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise DimensionError("gradient_check: f must return a scalar")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(an_flat[i] - numeric) / max(1.0, abs(an_flat[i]))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


class ParamRegistry:
    """Ordered name-to-tensor map; the order fixes serialization layout."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name: {name}")
        self._items[name] = tensor
        return tensor

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._items.items())

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __len__(self) -> int:
        return len(self._items)

    def total_size(self) -> int:
        return sum(t.size for t in self._items.values())

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self._items.values())

    def load_bytes(self, raw: bytes) -> None:
        need = self.total_size() * 8
        if len(raw) != need:
            raise ValueError(f"parameter payload is {len(raw)} bytes, expected {need}")
        off = 0
        for t in self._items.values():
            nb = t.size * 8
            t.data = np.frombuffer(raw[off : off + nb], dtype="<f8").reshape(t.shape).copy()
            off += nb

    def checksum(self) -> int:
        """64-bit digest of all parameter bytes in registration order."""
        digest = hashlib.sha256(self.to_bytes()).digest()
        return int.from_bytes(digest[:8], "little")

    def freeze(self) -> None:
        for t in self._items.values():
            t.requires_grad = False
            t.frozen = True
            t.grad = None


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError("cannot register a frozen parameter with an optimizer")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.frozen:
                raise FrozenParameterError("optimizer step on a frozen parameter")
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norms(self) -> dict[int, float]:
        return {i: float(np.linalg.norm(p.grad)) for i, p in enumerate(self.params) if p.grad is not None}
