"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Ops record onto an explicit Tape; a backward pass walks the records in
reverse topological order exactly once. Every op validates that its result
is finite. Only first-order derivatives and static graphs are supported.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "add", "sub", "mul", "div", "neg", "matmul",
    "tanh", "sigmoid", "exp", "log", "sqrt", "sin", "cos", "relu",
    "tsum", "tmean", "reshape", "concat", "narrow", "gather_rows",
    "softmax", "square", "safe_norm", "value", "OP_REGISTRY",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse (backward before forward, mixed tapes, ...)."""


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: "Tape | None" = None, nid: int = -1):
        self.data = _asarray(data)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    @property
    def grad(self) -> np.ndarray:
        if self.tape is None:
            raise TapeError("constant tensor has no gradient")
        return self.tape.grad(self)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.nid}"
        return f"Tensor({tag}, shape={self.data.shape})"

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of ops, walked backwards for gradients."""

    def __init__(self):
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.names: list[str] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self):
        return len(self.parents)

    def leaf(self, data, name: str = "leaf") -> Tensor:
        """Register a tracked input/parameter."""
        a = _asarray(data)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"leaf '{name}' contains non-finite values")
        return self._record(a, (), None, name)

    def _record(self, data: np.ndarray, parents: tuple[int, ...],
                vjp: Callable | None, name: str) -> Tensor:
        nid = len(self.parents)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(data.shape)
        self.names.append(name)
        return Tensor(data, self, nid)

    def grad(self, t: Tensor) -> np.ndarray:
        if self._grads is None:
            raise TapeError("backward has not been run on this tape")
        if t.tape is not self:
            raise TapeError("tensor does not belong to this tape")
        g = self._grads[t.nid]
        if g is None:
            return np.zeros(self.shapes[t.nid])
        return g

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate gradients of `output` w.r.t. every node on the tape.

        `seed` is the upstream gradient; defaults to ones with the output's
        shape (so a scalar output gets d(out)/d(out) = 1).
        """
        if output.tape is not self:
            raise TapeError("output tensor does not belong to this tape")
        if len(self.parents) == 0:
            raise TapeError("backward before forward: tape is empty")
        if seed is None:
            seed_arr = np.ones(self.shapes[output.nid])
        else:
            seed_arr = _asarray(seed)
            if seed_arr.shape != self.shapes[output.nid]:
                raise ShapeError(
                    f"seed shape {seed_arr.shape} != output shape "
                    f"{self.shapes[output.nid]}")
        grads: list[np.ndarray | None] = [None] * len(self.parents)
        grads[output.nid] = seed_arr
        for nid in range(output.nid, -1, -1):
            g = grads[nid]
            if g is None or self.vjps[nid] is None:
                continue
            parent_grads = self.vjps[nid](g)
            for pid, pg in zip(self.parents[nid], parent_grads):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self._grads = grads


def backward(tape: Tape, output: Tensor, seed=None) -> None:
    tape.backward(output, seed)


def value(x) -> np.ndarray:
    """Raw float64 array of a Tensor or array-like."""
    if isinstance(x, Tensor):
        return x.data
    return _asarray(x)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise TapeError("operands live on different tapes")
            tape = t.tape
    return tape


def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor],
          vjp_builder) -> Tensor:
    """Record `out` on the inputs' tape (if any), else return a constant."""
    _check_finite(out, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    tracked = [(i, t) for i, t in enumerate(inputs) if t.tape is not None]
    parent_ids = tuple(t.nid for _, t in tracked)
    tracked_pos = [i for i, _ in tracked]

    full_vjp = vjp_builder()

    def vjp(g):
        all_grads = full_vjp(g)
        return [all_grads[i] for i in tracked_pos]

    return tape._record(out, parent_ids, vjp, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp_builder():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _emit("add", out, (a, b), vjp_builder)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp_builder():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _emit("sub", out, (a, b), vjp_builder)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp_builder():
        ad, bd = a.data, b.data
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))

    return _emit("mul", out, (a, b), vjp_builder)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def vjp_builder():
        ad, bd = a.data, b.data
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g / bd, ash),
                          _unbroadcast(-g * ad / (bd * bd), bsh))

    return _emit("div", out, (a, b), vjp_builder)


def neg(a) -> Tensor:
    a = _lift(a)

    def vjp_builder():
        return lambda g: (-g,)

    return _emit("neg", -a.data, (a,), vjp_builder)


def matmul(a, b) -> Tensor:
    """np.matmul for stacked matrices; both operands must be >= 2-D."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from e

    def vjp_builder():
        ad, bd = a.data, b.data
        ash, bsh = a.shape, b.shape

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return (_unbroadcast(ga, ash), _unbroadcast(gb, bsh))

        return vjp

    return _emit("matmul", out, (a, b), vjp_builder)


def _unary(op, fwd, dfwd):
    def f(a) -> Tensor:
        a = _lift(a)
        with np.errstate(all="ignore"):
            out = fwd(a.data)

        def vjp_builder():
            ad = a.data
            return lambda g: (g * dfwd(ad, out),)

        return _emit(op, out, (a,), vjp_builder)

    f.__name__ = op
    return f


tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary("sigmoid", lambda x: 1.0 / (1.0 + np.exp(-x)),
                 lambda x, y: y * (1.0 - y))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
relu = _unary("relu", lambda x: np.maximum(x, 0.0),
              lambda x, y: (x > 0.0).astype(np.float64))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp_builder():
        ash = a.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, ash).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, ash).copy(),)

        return vjp

    return _emit("sum", np.asarray(out, dtype=np.float64), (a,), vjp_builder)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)

    def vjp_builder():
        ash = a.shape
        return lambda g: (g.reshape(ash),)

    return _emit("reshape", out, (a,), vjp_builder)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def vjp_builder():
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(ts), vjp_builder)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    a = _lift(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def vjp_builder():
        ash = a.shape

        def vjp(g):
            full = np.zeros(ash)
            full[idx] = g
            return (full,)

        return vjp

    return _emit("narrow", out, (a,), vjp_builder)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by integer index; duplicates accumulate grads."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = a.data[idx]

    def vjp_builder():
        ash = a.shape

        def vjp(g):
            full = np.zeros(ash)
            np.add.at(full, idx, g)
            return (full,)

        return vjp

    return _emit("gather_rows", out, (a,), vjp_builder)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp_builder():
        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return vjp

    return _emit("softmax", out, (a,), vjp_builder)


# ---------------------------------------------------------------------------
# composites


def square(a) -> Tensor:
    return mul(a, a)


def safe_norm(a, axis=-1, eps: float = 1e-24) -> Tensor:
    """L2 norm along `axis`; eps keeps the gradient finite at zero."""
    return sqrt(add(tsum(square(a), axis=axis), eps))


# ---------------------------------------------------------------------------
# primitive registry, used by the finite-difference property suite


class OpSpec:
    def __init__(self, name: str, sample: Callable, apply: Callable):
        self.name = name
        self.sample = sample  # rng -> list[np.ndarray]
        self.apply = apply    # list[Tensor] -> Tensor


def _std(rng, shape):
    return rng.normal(0.0, 1.0, shape)


OP_REGISTRY: dict[str, OpSpec] = {
    "add": OpSpec("add", lambda r: [_std(r, (2, 3)), _std(r, (3,))],
                  lambda ts: add(ts[0], ts[1])),
    "sub": OpSpec("sub", lambda r: [_std(r, (2, 3)), _std(r, (2, 3))],
                  lambda ts: sub(ts[0], ts[1])),
    "mul": OpSpec("mul", lambda r: [_std(r, (2, 3)), _std(r, (3,))],
                  lambda ts: mul(ts[0], ts[1])),
    "div": OpSpec("div", lambda r: [_std(r, (2, 3)),
                                    _std(r, (2, 3)) + 3.0],
                  lambda ts: div(ts[0], ts[1])),
    "neg": OpSpec("neg", lambda r: [_std(r, (4,))], lambda ts: neg(ts[0])),
    "matmul": OpSpec("matmul", lambda r: [_std(r, (2, 3)), _std(r, (3, 2))],
                     lambda ts: matmul(ts[0], ts[1])),
    "matmul_batched": OpSpec(
        "matmul_batched",
        lambda r: [_std(r, (4, 2, 3)), _std(r, (4, 3, 2))],
        lambda ts: matmul(ts[0], ts[1])),
    "tanh": OpSpec("tanh", lambda r: [_std(r, (5,))], lambda ts: tanh(ts[0])),
    "sigmoid": OpSpec("sigmoid", lambda r: [_std(r, (5,))],
                      lambda ts: sigmoid(ts[0])),
    "exp": OpSpec("exp", lambda r: [_std(r, (5,))], lambda ts: exp(ts[0])),
    "log": OpSpec("log", lambda r: [np.abs(_std(r, (5,))) + 0.5],
                  lambda ts: log(ts[0])),
    "sqrt": OpSpec("sqrt", lambda r: [np.abs(_std(r, (5,))) + 0.5],
                   lambda ts: sqrt(ts[0])),
    "sin": OpSpec("sin", lambda r: [_std(r, (5,))], lambda ts: sin(ts[0])),
    "cos": OpSpec("cos", lambda r: [_std(r, (5,))], lambda ts: cos(ts[0])),
    "relu": OpSpec("relu", lambda r: [_std(r, (7,)) + 0.05],
                   lambda ts: relu(ts[0])),
    "sum": OpSpec("sum", lambda r: [_std(r, (3, 4))], lambda ts: tsum(ts[0])),
    "sum_axis": OpSpec("sum_axis", lambda r: [_std(r, (3, 4))],
                       lambda ts: tsum(ts[0], axis=1)),
    "mean": OpSpec("mean", lambda r: [_std(r, (3, 4))],
                   lambda ts: tmean(ts[0])),
    "reshape": OpSpec("reshape", lambda r: [_std(r, (2, 6))],
                      lambda ts: reshape(ts[0], (3, 4))),
    "concat": OpSpec("concat", lambda r: [_std(r, (2, 3)), _std(r, (2, 2))],
                     lambda ts: concat(ts, axis=1)),
    "narrow": OpSpec("narrow", lambda r: [_std(r, (3, 5))],
                     lambda ts: narrow(ts[0], 1, 1, 3)),
    "gather_rows": OpSpec("gather_rows", lambda r: [_std(r, (4, 3))],
                          lambda ts: gather_rows(ts[0], [0, 2, 2, 1])),
    "softmax": OpSpec("softmax", lambda r: [_std(r, (3, 4))],
                      lambda ts: softmax(ts[0], axis=-1)),
}
