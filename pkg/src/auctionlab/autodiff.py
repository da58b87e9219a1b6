"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` is a node in a per-step computation graph: it wraps a numpy
array, remembers the op and parents that produced it, and accumulates a
gradient during ``backward()``. Graphs are rebuilt every step (all networks
here are feed-forward) and freed with the step's locals, which bounds
memory. Everything is float64: the permutation softmax at low temperature
amplifies score differences enough that float32 error becomes visible in
the cross-entropy loss.

Also provides the Adam update rule, a JSON checkpoint format (see
``save_params``), and a central finite-difference gradient checker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes invalid for the requested op."""


class GradientError(RuntimeError):
    """Non-finite gradient or an invalid backward call."""


class Tensor:
    """A value in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is populated by
    ``backward()`` on every reachable node with ``track=True``; leaf
    constants are created with ``track=False`` so large batch inputs do
    not allocate gradient buffers.
    """

    __slots__ = ("data", "grad", "op", "name", "_parents", "_backward", "_track")

    def __init__(self, data, parents=(), op="leaf", name=None, track=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._track = track

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{label})"

    def item(self) -> float:
        return float(self.data)

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self._track:
            return
        if self.grad is None:
            # Copy: g may alias a child's grad buffer or a numpy view.
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar root; accumulates into ``grad``."""
        if self.data.size != 1:
            raise GradientError(f"backward() root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        """A constant view of this value; gradients stop here."""
        return Tensor(self.data, op="detach", track=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, op="const", track=False)


def constant(x, name=None) -> Tensor:
    """An untracked leaf: participates in forward math, receives no grad."""
    t = Tensor(x, op="const", track=False)
    t.name = name
    return t


def parameter(x, name=None) -> Tensor:
    return Tensor(x, op="param", name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, (a, b), "add")

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b), "mul")

    def _bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data, (a, b), "div")

    def _bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = _bw
    return out


def safe_div(num: Tensor, den: Tensor, floor: float = 1e-9) -> Tensor:
    """num/den where den >= floor, else 0. Gradients masked the same way."""
    _check_broadcast(num, den, "safe_div")
    mask = den.data >= floor
    denom = np.where(mask, den.data, 1.0)
    out = Tensor(np.where(mask, num.data / denom, 0.0), (num, den), "safe_div")

    def _bw(g):
        gm = g * mask
        num._accumulate(_unbroadcast(gm / denom, num.shape))
        den._accumulate(_unbroadcast(-gm * num.data / (denom * denom), den.shape))

    out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, _lift(float(s)))


# -- matrix ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D or stacked (batched) matrix product; batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    out = Tensor(np.matmul(a.data, b.data), (a, b), "matmul")

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    out._backward = _bw
    return out


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: need >=2 dims, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2), (a,), "transpose")
    out._backward = lambda g: a._accumulate(np.swapaxes(g, -1, -2))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    out = Tensor(data, (a,), "broadcast_to")
    out._backward = lambda g: a._accumulate(_unbroadcast(g, a.shape))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = _bw
    return out


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,), "relu")
    out._backward = lambda g: a._accumulate(g * (a.data > 0))
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y, (a,), "sigmoid")
    out._backward = lambda g: a._accumulate(g * y * (1.0 - y))
    return out


LOG_FLOOR = 1e-12


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped to >= 1e-12; zero slope below the floor."""
    x = np.maximum(a.data, LOG_FLOOR)
    out = Tensor(np.log(x), (a,), "log")
    out._backward = lambda g: a._accumulate(np.where(a.data > LOG_FLOOR, g / x, 0.0))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (a,), "softmax")

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    out._backward = _bw
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse, (a,), "log_softmax")
    y = np.exp(z - lse)

    def _bw(g):
        a._accumulate(g - y * g.sum(axis=axis, keepdims=True))

    out._backward = _bw
    return out


def log_softmax_pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Fused log-softmax over the last axis followed by a gather:
    out[..., r] = log_softmax(a)[..., r, idx[..., r]].

    idx has a's shape minus the last axis. Avoids materializing the full
    log-probability tensor (only the softmax is kept for backward).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"log_softmax_pick: index shape {idx.shape} != row shape {a.shape[:-1]}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    out = Tensor(picked - np.log(denom[..., 0]), (a,), "log_softmax_pick")
    soft = e / denom

    def _bw(g):
        ga = soft * (-g[..., None])
        np.add.at(ga, (*np.indices(idx.shape), idx), g)
        a._accumulate(ga)

    out._backward = _bw
    return out


def rank_logits(scores: Tensor, rowsums: Tensor, scaling: np.ndarray, inv_temperature: float) -> Tensor:
    """Fused construction of the relaxed-sort row logits:
    out[b, j, i] = (scaling[j] * scores[b, i] - rowsums[b, i]) * inv_temperature.
    """
    if scores.shape != rowsums.shape or scores.ndim != 2:
        raise ShapeError(f"rank_logits: need matching [B, n], got {scores.shape} and {rowsums.shape}")
    s = np.asarray(scaling, dtype=np.float64)
    data = (s[None, :, None] * scores.data[:, None, :] - rowsums.data[:, None, :]) * inv_temperature
    out = Tensor(data, (scores, rowsums), "rank_logits")

    def _bw(g):
        scores._accumulate(np.einsum("j,bji->bi", s, g) * inv_temperature)
        rowsums._accumulate(-g.sum(axis=1) * inv_temperature)

    out._backward = _bw
    return out


def clip(a: Tensor, lo, hi) -> Tensor:
    """Clamp to constant bounds (scalar or ndarray); gradient passes through
    inside [lo, hi] and is zero where the clamp is active."""
    out = Tensor(np.clip(a.data, lo, hi), (a,), "clip")
    mask = (a.data >= lo) & (a.data <= hi)
    out._backward = lambda g: a._accumulate(g * mask)
    return out


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def _bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = _bw
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


# -- gathers ------------------------------------------------------------------


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather from a 2D table; backward is a scatter-add (hot kernel).

    idx may have any shape; output shape is idx.shape + (table.shape[1],).
    """
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2D, got {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx], (table,), "take_rows")

    def _bw(g):
        if not table._track:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        _kernels.scatter_add_rows(
            table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1])
        )

    out._backward = _bw
    return out


def take_axis1(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 1 with one index vector shared by the whole batch:
    out[b, t, ...] = a[b, idx[t], ...].
    """
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[:, idx], (a,), "take_axis1")

    def _bw(g):
        if not a._track:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        # Loop over gathered positions: each statement is a full-batch add,
        # duplicates across positions accumulate across iterations.
        for t in range(idx.shape[0]):
            a.grad[:, idx[t]] += g[:, t]

    out._backward = _bw
    return out


def gather_along(a: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward:
    out = a gathered at ``idx`` along ``axis``; idx.ndim must equal a.ndim.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != idx.ndim:
        raise ShapeError(f"gather_along: value ndim {a.ndim} != index ndim {idx.ndim}")
    axis = axis % a.ndim
    out = Tensor(np.take_along_axis(a.data, idx, axis=axis), (a,), "gather_along")

    def _bw(g):
        if not a._track:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        grids = list(np.indices(idx.shape))
        grids[axis] = idx
        np.add.at(a.grad, tuple(grids), g)

    out._backward = _bw
    return out


def abs_pairwise_diff(a: Tensor) -> Tensor:
    """Full absolute pairwise-difference matrix over the last axis:
    out[..., i, j] = |a[..., i] - a[..., j]|.
    """
    d = a.data[..., :, None] - a.data[..., None, :]
    out = Tensor(np.abs(d), (a,), "abs_pairwise_diff")
    s = np.sign(d)

    def _bw(g):
        a._accumulate((g * s).sum(axis=-1) - (g * s).sum(axis=-2))

    out._backward = _bw
    return out


def absdiff_rowsums(a: Tensor) -> Tensor:
    """Fused row sums of the absolute pairwise-difference matrix
    (same values as ``abs_pairwise_diff(a).sum(-1)`` without the square
    intermediate). a: [B, n] -> [B, n]. Dispatches to the compiled kernel.
    """
    if a.ndim != 2:
        raise ShapeError(f"absdiff_rowsums: need [B, n], got {a.shape}")
    out = Tensor(_kernels.absdiff_rowsums(a.data), (a,), "absdiff_rowsums")
    out._backward = lambda g: a._accumulate(_kernels.absdiff_rowsums_grad(a.data, g))
    return out


# -- op registry --------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": lambda *ts: concat(ts, axis=-1),
    "row_softmax": softmax,
    "sigmoid": sigmoid,
    "log": log,
    "sum": tsum,
    "scale": scale,
    "abs_pairwise_diff": abs_pairwise_diff,
}


def forward_op(kind: str, *inputs) -> Tensor:
    """Dispatch an op by tag; shape errors name both operand shapes."""
    if kind not in OPS:
        raise KeyError(f"unknown op kind {kind!r}; known: {sorted(OPS)}")
    return OPS[kind](*[_lift(x) if not isinstance(x, (int, float)) else x for x in inputs])


# -- parameters, Adam, checkpoints --------------------------------------------


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass
class AdamState:
    """Bias-corrected Adam with the usual defaults."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """One Adam update from the grads accumulated on ``params``.

    Parameters with no grad (unreachable from the loss) are left unchanged.
    A non-finite gradient aborts, naming the offending parameter.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


CHECKPOINT_VERSION = 1


def save_params(path, params: dict[str, Tensor]) -> None:
    """Write a flat name -> {shape, data} JSON checkpoint.

    Layout: {"schema_version": 1, "tensors": {name: {"shape": [...],
    "data": [row-major float64 values]}}}. Stable across versions.
    """
    payload = {
        "schema_version": CHECKPOINT_VERSION,
        "tensors": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path) -> dict[str, Tensor]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('schema_version')}")
    out = {}
    for name, rec in payload["tensors"].items():
        out[name] = parameter(np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"]), name)
    return out


# -- finite-difference checking ------------------------------------------------


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    n_coords: int = 100,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
) -> float:
    """Compare analytic grads against central finite differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call.
    Samples ``n_coords`` random parameter coordinates and returns the worst
    normalized error; a return value <= rel_tol means every coordinate
    satisfies |analytic - fd| <= max(rel_tol * magnitude, abs_tol).
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    names = sorted(params)
    floor = abs_tol / rel_tol
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = params[name]
        flat = p.data.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn().item()
        flat[j] = orig - h
        down = loss_fn().item()
        flat[j] = orig
        fd = (up - down) / (2.0 * h)
        an = analytic[name].reshape(-1)[j]
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        worst = max(worst, err)
    return worst
