"""Dense float64 arrays with tape-based reverse-mode differentiation, plus Adam.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(matmul(x, w)))
    backward(loss, tape)
    w.grad  # same shape as w.data

Operations executed outside an active tape (or on inputs that do not require
gradients) are evaluated eagerly and not recorded, which is how frozen
encoders run at evaluation time.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from dualview.errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    NonFiniteError,
)

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dualview_active_tape", default=None
)
_node_ids = itertools.count()

DEGENERATE_NORM = 1e-12


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = next(_node_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Record(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Entering the tape as a context manager makes it the active tape for the
    current context; records are appended in execution order, so the list is a
    valid topological order by construction.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, copy=False)
    tape = _ACTIVE_TAPE.get()
    if needs_grad and tape is not None:
        tape.records.append(Record(op, inputs, out, vjp))
    return out


def _require_2d(name: str, *ts: Tensor):
    for t in ts:
        if t.ndim != 2:
            raise DimensionError(f"{name} expects 2-D inputs, got shape {t.shape}")


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
        return _emit("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    if b.size == 1:
        return _emit("add_scalar", a.data + b.data.reshape(()), (a, b),
                     lambda g: (g, np.full(b.shape, g.sum())))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return _emit("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise EmptyInputError("mean of an empty tensor")
    shape, n = x.shape, x.size
    return _emit("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def mean_rows(x: Tensor) -> Tensor:
    """Average over rows: ``[r, c] -> [c]``."""
    _require_2d("mean_rows", x)
    r = x.shape[0]
    if r == 0:
        raise EmptyInputError("mean_rows needs at least one row")
    return _emit("mean_rows", x.data.mean(axis=0), (x,),
                 lambda g: (np.broadcast_to(g / r, x.shape).copy(),))


def group_mean(x: Tensor, group: int, weights: np.ndarray | None = None) -> Tensor:
    """Average consecutive blocks of ``group`` rows: ``[n*group, c] -> [n, c]``.

    ``weights`` (constant, one per input row) turns this into a weighted mean
    within each block; every block needs a positive weight total.
    """
    _require_2d("group_mean", x)
    rows, c = x.shape
    if group < 1 or rows % group:
        raise DimensionError(f"group_mean: {rows} rows do not split into groups of {group}")
    n = rows // group
    if weights is None:
        w = np.full((n, group), 1.0 / group)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(n, group)
        totals = w.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise EmptyInputError("group_mean: a group has zero total weight")
        w = w / totals
    x3 = x.data.reshape(n, group, c)
    out = np.einsum("ng,ngc->nc", w, x3)
    return _emit("group_mean", out, (x,),
                 lambda g: ((w[:, :, None] * g[:, None, :]).reshape(rows, c),))


def l2_normalize_rows(x: Tensor) -> Tensor:
    _require_2d("l2_normalize_rows", x)
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(norms <= DEGENERATE_NORM)
    if bad.size:
        raise DegenerateVectorError(f"rows {bad.tolist()} have norm <= {DEGENERATE_NORM:g}")
    y = x.data / norms[:, None]

    def vjp(g):
        radial = np.einsum("ij,ij->i", g, y)
        return ((g - y * radial[:, None]) / norms[:, None],)

    return _emit("l2_normalize_rows", y, (x,), vjp)


def cosine_matrix(u: Tensor, v: Tensor) -> Tensor:
    """Pairwise cosine similarities ``[p, d] x [q, d] -> [p, q]``."""
    _require_2d("cosine_matrix", u, v)
    if u.shape[1] != v.shape[1]:
        raise DimensionError(f"cosine_matrix: feature sizes differ, {u.shape} vs {v.shape}")
    return matmul(l2_normalize_rows(u), transpose(l2_normalize_rows(v)))


def logsumexp_rows(x: Tensor) -> Tensor:
    _require_2d("logsumexp_rows", x)
    if x.shape[1] < 1:
        raise EmptyInputError("logsumexp_rows needs at least one column")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _emit("logsumexp_rows", out, (x,), lambda g: (g[:, None] * soft,))


def diag(x: Tensor) -> Tensor:
    _require_2d("diag", x)
    k = min(x.shape)
    idx = np.arange(k)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[idx, idx] = g
        return (out,)

    return _emit("diag", x.data[idx, idx].copy(), (x,), vjp)


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather single entries ``x[rows[k], cols[k]]`` into a vector."""
    _require_2d("pick", x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _emit("pick", x.data[rows, cols], (x,), vjp)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding): ``table[ids]``."""
    _require_2d("gather_rows", table)
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"gather_rows: ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _emit("gather_rows", table.data[ids], (table,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    _require_2d("concat_rows", *parts)
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=0)
    return _emit("concat_rows", out, tuple(parts),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column block ``x[:, start:stop]``."""
    _require_2d("slice_cols", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: bad range [{start}, {stop}) for {x.shape[1]} columns")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _emit("slice_cols", x.data[:, start:stop].copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()) -> list[Tensor]:
    """Propagate d(loss) back through ``tape`` and store ``.grad`` on leaves.

    Every requires-grad leaf seen on the tape, plus any tensor listed in
    ``wrt``, receives a gradient (zeros when the loss does not depend on it).
    The tape is cleared afterwards. Returns the leaves that received grads.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {rec.output.node for rec in tape.records}
    if loss.requires_grad and loss.node not in produced and tape.records:
        raise ContractError("loss was not produced on this tape")

    leaves: dict[int, Tensor] = {}
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and t.node not in produced:
                leaves[t.node] = t
        g = grads.pop(rec.output.node, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node in grads:
                grads[t.node] = grads[t.node] + gi
            else:
                grads[t.node] = np.asarray(gi, dtype=np.float64)

    for t in wrt:
        leaves.setdefault(t.node, t)
    if loss.requires_grad and loss.node not in produced:
        leaves.setdefault(loss.node, loss)
    for node, t in leaves.items():
        g = grads.get(node)
        t.grad = np.zeros(t.shape) if g is None else g.reshape(t.shape)
    tape.clear()
    return list(leaves.values())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied by replacing each ``p.data``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: params, grads and moments differ in count")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise DimensionError(
                f"adam_step: param shape {p.shape}, grad shape {np.shape(g)}, "
                f"moment shape {m.shape}"
            )
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = p.data - update
    return params
