"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every primitive records itself on the active :class:`Tape` and expresses its
backward rule in terms of other primitives.  Running :meth:`Tape.gradient`
with ``as_graph=True`` therefore records the backward pass too, and the
resulting gradients can be differentiated again.  That is what lets the
condensation loop optimise synthetic features through a loss that is itself
built from parameter gradients.

Typical use::

    with Tape() as tape:
        w = tape.watch(np.ones((3, 2)))
        loss = tsum(square(matmul(x, w)))
        (gw,) = tape.gradient(loss, [w], as_graph=True)
        penalty = tsum(square(gw))
        (gw2,) = tape.gradient(penalty, [w])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NumericError",
    "Tensor",
    "Tape",
    "as_tensor",
    "record",
    "finite_diff",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "tsum",
    "mean",
    "masked_cross_entropy",
    "square",
    "sqrt",
    "concat_cols",
    "slice_cols",
    "pad_cols",
    "gather_rows",
    "scatter_rows",
    "transpose",
    "reshape",
    "broadcast_to",
    "PRIMITIVES",
]


class DimensionError(ValueError):
    """Operand shapes do not fit the primitive's signature."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


_ACTIVE: list["Tape"] = []


def _active_tape() -> "Tape | None":
    if not _ACTIVE:
        return None
    tape = _ACTIVE[-1]
    return None if tape._paused else tape


class Tensor:
    """Immutable float64 array, optionally a node on a :class:`Tape`."""

    __slots__ = ("value", "parents", "vjp", "op", "tape", "idx")

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "const"
        self.tape: Tape | None = None
        self.idx = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        where = f", node={self.idx}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, op={self.op}{where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so the list is topologically ordered
    by construction.  Only one tape is active at a time (the innermost
    ``with`` block).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: set[int] = set()
        self._paused = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _append(self, t: Tensor) -> Tensor:
        t.tape = self
        t.idx = len(self.nodes)
        self.nodes.append(t)
        return t

    def watch(self, x) -> Tensor:
        """Register ``x`` as a differentiable leaf and return its node."""
        if isinstance(x, Tensor):
            if x.tape is self:
                self.leaves.add(x.idx)
                return x
            x = Tensor(x.value)
        else:
            x = Tensor(x)
        x.op = "leaf"
        self._append(x)
        self.leaves.add(x.idx)
        return x

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], as_graph: bool = False) -> list[Tensor]:
        """Reverse-mode gradients of scalar ``output`` with respect to ``wrt``.

        Unreachable targets get zero gradients.  With ``as_graph`` the
        backward computation is itself recorded, so the returned tensors are
        tape nodes that can be differentiated again.
        """
        if output.value.size != 1:
            raise ContractError(f"gradient needs a scalar output, got shape {output.shape}")
        wrt = list(wrt)
        if output.tape is not self:
            return [Tensor(np.zeros(w.shape)) for w in wrt]
        targets = {w.idx for w in wrt if w.tape is self}

        # nodes on a path to some target; everything else is skipped
        relevant = np.zeros(output.idx + 1, dtype=bool)
        for i in range(output.idx + 1):
            node = self.nodes[i]
            if i in targets:
                relevant[i] = True
            else:
                for p in node.parents:
                    if p.tape is self and p.idx <= output.idx and relevant[p.idx]:
                        relevant[i] = True
                        break

        grads: dict[int, Tensor] = {}
        if not as_graph:
            self._paused += 1
        try:
            grads[output.idx] = Tensor(np.ones(output.shape))
            for i in range(output.idx, -1, -1):
                if not relevant[i] or i not in grads:
                    continue
                node = self.nodes[i]
                if node.vjp is None:
                    continue
                g = grads[i]
                needs = tuple(p.tape is self and relevant[p.idx] for p in node.parents)
                parent_grads = node.vjp(g, needs)
                for p, need, pg in zip(node.parents, needs, parent_grads):
                    if not need or pg is None:
                        continue
                    if p.idx in grads:
                        grads[p.idx] = add(grads[p.idx], pg)
                    else:
                        grads[p.idx] = pg
        finally:
            if not as_graph:
                self._paused -= 1

        out = []
        for w in wrt:
            if w.tape is self and w.idx in grads:
                g = grads[w.idx]
                out.append(g if as_graph else Tensor(g.value))
            else:
                out.append(Tensor(np.zeros(w.shape)))
        return out


def _make(value: np.ndarray, parents: Sequence, vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced non-finite values")
    t = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.tape is tape for p in parents):
        t.parents = tuple(parents)
        t.vjp = vjp
        t.op = op
        tape._append(t)
    return t


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of row/column broadcasting)."""
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return tsum(g)
    if len(shape) < g.value.ndim:
        # (k,) broadcast against (n, k)
        return reshape(tsum(g, axis=0, keepdims=True), shape)
    out = g
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            out = tsum(out, axis=ax, keepdims=True)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.value.ndim > 2 or b.value.ndim > 2:
        raise DimensionError(f"{op}: only up to 2-D operands are supported, got {a.shape} and {b.shape}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- primitives ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make(a.value @ b.value, (a, b), vjp, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(scale(g, -1.0), b.shape) if needs[1] else None,
        )

    return _make(a.value - b.value, (a, b), vjp, "sub")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def vjp(g, needs):
        return (scale(g, s),)

    return _make(a.value * s, (a,), vjp, "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise NumericError("div: division by zero")
    out_holder = []

    def vjp(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(scale(div(mul(g, out_holder[0]), b), -1.0), b.shape)
        return ga, gb

    out = _make(a.value / b.value, (a, b), vjp, "div")
    out_holder.append(out)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient 0 at the kink
    mask = Tensor((a.value > 0).astype(np.float64))

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make(np.maximum(a.value, 0.0), (a,), vjp, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    holder = []

    def vjp(g, needs):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    x = a.value
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(val, (a,), vjp, "sigmoid")
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, sigmoid(a)),)

    return _make(np.logaddexp(0.0, a.value), (a,), vjp, "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    holder = []

    def vjp(g, needs):
        return (mul(g, holder[0]),)

    out = _make(np.exp(a.value), (a,), vjp, "exp")
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log: non-positive input")

    def vjp(g, needs):
        return (div(g, a),)

    return _make(np.log(a.value), (a,), vjp, "log")


def square(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, scale(a, 2.0)),)

    return _make(a.value * a.value, (a,), vjp, "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt: negative input")
    holder = []

    def vjp(g, needs):
        return (div(g, scale(holder[0], 2.0)),)

    out = _make(np.sqrt(a.value), (a,), vjp, "sqrt")
    holder.append(out)
    return out


def _check_2d(op: str, a: Tensor) -> None:
    if a.value.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D operand, got shape {a.shape}")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(a) -> Tensor:
    """Row-wise softmax."""
    a = as_tensor(a)
    _check_2d("softmax", a)
    holder = []

    def vjp(g, needs):
        s = holder[0]
        inner = tsum(mul(g, s), axis=1, keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _make(_softmax_np(a.value), (a,), vjp, "softmax")
    holder.append(out)
    return out


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax (log-sum-exp stabilised)."""
    a = as_tensor(a)
    _check_2d("log_softmax", a)
    x = a.value
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))

    def vjp(g, needs):
        return (sub(g, mul(softmax(a), tsum(g, axis=1, keepdims=True))),)

    return _make(x - lse, (a,), vjp, "log_softmax")


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            shp = list(a.shape)
            shp[axis] = 1
            g = reshape(g, tuple(shp))
        elif axis is None and g.shape != ():
            g = reshape(g, ())
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        val = np.broadcast_to(a.value, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape),)

    return _make(np.array(val), (a,), vjp, "broadcast_to")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _check_2d("transpose", a)

    def vjp(g, needs):
        return (transpose(g),)

    return _make(a.value.T.copy(), (a,), vjp, "transpose")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}")

    def vjp(g, needs):
        return (reshape(g, a.shape),)

    return _make(a.value.reshape(shape), (a,), vjp, "reshape")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    _check_2d("slice_cols", a)
    width = a.shape[1]
    if not 0 <= start <= stop <= width:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")

    def vjp(g, needs):
        return (pad_cols(g, start, width),)

    return _make(a.value[:, start:stop].copy(), (a,), vjp, "slice_cols")


def pad_cols(a, start: int, width: int) -> Tensor:
    """Place ``a`` at column offset ``start`` inside a zero matrix of ``width`` columns."""
    a = as_tensor(a)
    _check_2d("pad_cols", a)
    stop = start + a.shape[1]
    if start < 0 or stop > width:
        raise DimensionError(f"pad_cols: block {a.shape} at {start} exceeds width {width}")
    val = np.zeros((a.shape[0], width))
    val[:, start:stop] = a.value

    def vjp(g, needs):
        return (slice_cols(g, start, stop),)

    return _make(val, (a,), vjp, "pad_cols")


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _check_2d("concat_cols", p)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g, needs):
        return tuple(
            slice_cols(g, int(offsets[k]), int(offsets[k + 1])) if needs[k] else None
            for k in range(len(parts))
        )

    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp, "concat_cols")


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    _check_2d("gather_rows", a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.shape}")
    n = a.shape[0]

    def vjp(g, needs):
        return (scatter_rows(g, index, n),)

    return _make(a.value[index], (a,), vjp, "gather_rows")


def scatter_rows(a, index, n: int) -> Tensor:
    """Sum rows of ``a`` into an ``n``-row zero matrix at ``index`` (adjoint of gather)."""
    a = as_tensor(a)
    _check_2d("scatter_rows", a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise DimensionError(f"scatter_rows: {index.shape[0]} indices for {a.shape[0]} rows")
    val = np.zeros((n, a.shape[1]))
    np.add.at(val, index, a.value)

    def vjp(g, needs):
        return (gather_rows(g, index),)

    return _make(val, (a,), vjp, "scatter_rows")


def masked_cross_entropy(logits, labels, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows where ``mask`` is set."""
    logits = as_tensor(logits)
    _check_2d("masked_cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, c = logits.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"masked_cross_entropy: labels {labels.shape} / mask {mask.shape} vs logits {logits.shape}")
    k = int(mask.sum())
    if k == 0:
        raise ContractError("masked_cross_entropy: empty loss mask")
    rows = np.flatnonzero(mask)
    if labels[rows].min() < 0 or labels[rows].max() >= c:
        raise DimensionError("masked_cross_entropy: label out of range")

    x = logits.value
    m = x.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]
    value = float(np.sum(lse[rows] - x[rows, labels[rows]]) / k)

    onehot = np.zeros((n, c))
    onehot[rows, labels[rows]] = 1.0
    weight = np.zeros((n, 1))
    weight[rows] = 1.0 / k
    onehot_t, weight_t = Tensor(onehot), Tensor(weight)

    def vjp(g, needs):
        local = mul(sub(softmax(logits), onehot_t), weight_t)
        return (mul(local, g),)

    return _make(np.array(value), (logits,), vjp, "masked_cross_entropy")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": tsum,
    "mean": mean,
    "masked_cross_entropy": masked_cross_entropy,
    "square": square,
    "sqrt": sqrt,
    "concat_cols": concat_cols,
    "slice_cols": slice_cols,
    "pad_cols": pad_cols,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
}


def record(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply primitive ``op`` by name; recorded on the active tape if any input is."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    if op == "concat_cols":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ContractError("finite_diff: eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
