"""Dense float64 tensors with tape-based reverse-mode differentiation.

Small by design: enough ops for multilayer perceptrons and the composite
penalty expressions built on top of them. Every op records a node on a
Tape; one backward pass per tape yields gradients for all trainable
leaves. Absolute value uses subgradient 0 at 0, and ReLU uses derivative
0 at 0; these conventions are relied on elsewhere and must not change.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeMismatchError",
    "TapeError",
    "NonFiniteValueError",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "safediv",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "absval",
    "square",
    "mean",
    "total",
    "wsum",
    "bce_from_logits",
    "squared_error",
    "segment",
    "reshape",
    "hstack",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class TapeError(RuntimeError):
    """Raised on tape misuse (reuse, cross-tape ops, non-scalar backward)."""


class NonFiniteValueError(ValueError):
    """Raised by grad_check when an evaluation is non-finite.

    ``coordinate`` is the perturbed coordinate index, or None if the
    unperturbed evaluation was already non-finite.
    """

    def __init__(self, coordinate, message="non-finite function value"):
        self.coordinate = coordinate
        super().__init__(f"{message} (coordinate {coordinate})")


class Tape:
    """Ordered record of forward ops; creation order is topological."""

    __slots__ = ("_order", "_leaves", "_spent")

    def __init__(self):
        self._order: list[Tensor] = []
        self._leaves: list[Tensor] = []
        self._spent = False

    def param(self, data) -> "Tensor":
        """Register a trainable leaf."""
        t = Tensor(data, tape=self, trainable=True)
        self._leaves.append(t)
        self._order.append(t)
        return t

    def const(self, data) -> "Tensor":
        """Register a non-trainable leaf."""
        t = Tensor(data, tape=self, trainable=False)
        self._order.append(t)
        return t


class Tensor:
    """Value node. ``data`` is always a float64 ndarray."""

    __slots__ = ("data", "tape", "trainable", "_parents", "_vjp")

    def __init__(self, data, tape=None, trainable=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.trainable = trainable
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, trainable={self.trainable})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _find_tape(args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise TapeError("operands belong to different tapes")
    if tape is None:
        raise TapeError("no tape among operands; create leaves via Tape.param/const")
    return tape


def _coerce(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _node(out_data, parents, vjp) -> Tensor:
    tape = parents[0].tape
    t = Tensor(out_data, tape=tape, parents=tuple(parents), vjp=vjp)
    tape._order.append(t)
    return t


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Tensor:
    tape = _find_tape((a, b))
    a, b = _coerce(a, tape), _coerce(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError("matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def _broadcast_binary(name, a, b, fwd, dfa, dfb) -> Tensor:
    tape = _find_tape((a, b))
    a, b = _coerce(a, tape), _coerce(b, tape)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(name, a.data.shape, b.data.shape) from None

    def vjp(g):
        return (
            _unbroadcast(dfa(g, a.data, b.data), a.data.shape),
            _unbroadcast(dfb(g, a.data, b.data), b.data.shape),
        )

    return _node(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _broadcast_binary(
        "add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g
    )


def sub(a, b) -> Tensor:
    return _broadcast_binary(
        "sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g
    )


def mul(a, b) -> Tensor:
    return _broadcast_binary(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def safediv(a, b) -> Tensor:
    """Elementwise a/b with the convention 0 where b == 0 (zero gradients there)."""
    tape = _find_tape((a, b))
    a, b = _coerce(a, tape), _coerce(b, tape)
    try:
        nz = b.data != 0.0
        out = np.divide(a.data, b.data, out=np.zeros(np.broadcast(a.data, b.data).shape), where=nz)
    except ValueError:
        raise ShapeMismatchError("safediv", a.data.shape, b.data.shape) from None

    def vjp(g):
        mask = b.data != 0.0
        inv = np.divide(1.0, b.data, out=np.zeros_like(b.data, dtype=np.float64), where=mask)
        ga = g * inv
        gb = -g * a.data * inv * inv
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), vjp)


def _unary(a, fwd, grad_local) -> Tensor:
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    out = fwd(a.data)

    def vjp(g):
        return (g * grad_local(a.data, out),)

    return _node(out, (a,), vjp)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, out: (x > 0.0).astype(np.float64))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign for stability
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid, lambda x, out: out * (1.0 - out))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    return _unary(a, _softplus, lambda x, out: _sigmoid(x))


def softmax(a, axis: int = -1) -> Tensor:
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def absval(a) -> Tensor:
    # np.sign(0) == 0: the shared subgradient convention at the kink
    return _unary(a, np.abs, lambda x, out: np.sign(x))


def square(a) -> Tensor:
    return _unary(a, np.square, lambda x, out: 2.0 * x)


def mean(a) -> Tensor:
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def vjp(g):
        return (np.full(a.data.shape, float(g) / n),)

    return _node(out, (a,), vjp)


def total(a) -> Tensor:
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.full(a.data.shape, float(g)),)

    return _node(out, (a,), vjp)


def wsum(values, weights) -> Tensor:
    """Weighted sum sum_i values_i * weights_i, a scalar."""
    tape = _find_tape((values, weights))
    v, w = _coerce(values, tape), _coerce(weights, tape)
    if v.data.shape != w.data.shape:
        raise ShapeMismatchError("wsum", v.data.shape, w.data.shape)
    out = np.asarray((v.data * w.data).sum())

    def vjp(g):
        return float(g) * w.data, float(g) * v.data

    return _node(out, (v, w), vjp)


def bce_from_logits(logits, targets) -> Tensor:
    """Per-element binary cross-entropy from logits, targets in {0,1}.

    Stable form max(x,0) - x*y + log(1 + exp(-|x|)).
    """
    tape = _find_tape((logits, targets))
    x, y = _coerce(logits, tape), _coerce(targets, tape)
    if x.data.shape != y.data.shape:
        raise ShapeMismatchError("bce_from_logits", x.data.shape, y.data.shape)
    out = np.maximum(x.data, 0.0) - x.data * y.data + np.log1p(np.exp(-np.abs(x.data)))

    def vjp(g):
        return g * (_sigmoid(x.data) - y.data), g * (-x.data)

    return _node(out, (x, y), vjp)


def squared_error(pred, target) -> Tensor:
    tape = _find_tape((pred, target))
    p, t = _coerce(pred, tape), _coerce(target, tape)
    if p.data.shape != t.data.shape:
        raise ShapeMismatchError("squared_error", p.data.shape, t.data.shape)
    diff = p.data - t.data
    out = diff * diff

    def vjp(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _node(out, (p, t), vjp)


def segment(a, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-d tensor."""
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    if a.data.ndim != 1 or not (0 <= start <= stop <= a.data.size):
        raise ShapeMismatchError(f"segment[{start}:{stop}]", a.data.shape, (stop - start,))
    out = a.data[start:stop].copy()

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        return (buf,)

    return _node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    tape = _find_tape((a,))
    a = _coerce(a, tape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.data.shape, shape) from None

    def vjp(g):
        return (np.asarray(g).reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def hstack(a, b) -> Tensor:
    """Column-concatenate two rank-2 tensors with equal row counts."""
    tape = _find_tape((a, b))
    a, b = _coerce(a, tape), _coerce(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatchError("hstack", a.data.shape, b.data.shape)
    out = np.hstack([a.data, b.data])
    ka = a.data.shape[1]

    def vjp(g):
        return g[:, :ka], g[:, ka:]

    return _node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(out: Tensor) -> dict:
    """Run the reverse pass from a scalar output.

    Returns a map {trainable leaf -> gradient ndarray of the leaf's shape}
    covering every trainable leaf on the tape (zeros when disconnected).
    A tape supports exactly one backward pass.
    """
    if out.tape is None:
        raise TapeError("output is not recorded on a tape")
    if out.data.size != 1:
        raise TapeError(f"backward requires a scalar output, got shape {out.data.shape}")
    tape = out.tape
    if tape._spent:
        raise TapeError("backward already ran on this tape")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(tape._order):
        if node._vjp is None:
            continue  # leaves keep their accumulated gradients
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    result = {}
    for leaf in tape._leaves:
        g = grads.get(id(leaf))
        result[leaf] = np.zeros_like(leaf.data) if g is None else g
    return result


def grad_check(f, point, step: float) -> float:
    """Max relative error between analytic gradient and central differences.

    ``f`` maps a 1-d parameter leaf Tensor to a scalar Tensor; it is called
    once for the analytic gradient and twice per coordinate for the central
    differences. Relative error per coordinate is
    |analytic - central| / max(1, |central|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64).reshape(-1)

    tape = Tape()
    leaf = tape.param(point.copy())
    out = f(leaf)
    if out.data.size != 1:
        raise TapeError("grad_check target must be scalar")
    if not np.isfinite(out.data.reshape(-1)[0]):
        raise NonFiniteValueError(None)
    analytic = backward(out)[leaf]

    def value_at(vec, coord):
        t = Tape()
        v = f(t.param(vec)).item()
        if not np.isfinite(v):
            raise NonFiniteValueError(coord)
        return v

    worst = 0.0
    for j in range(point.size):
        shift = np.zeros_like(point)
        shift[j] = step
        central = (value_at(point + shift, j) - value_at(point - shift, j)) / (2.0 * step)
        err = abs(analytic[j] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
