"""Dense tensors with tape-based reverse-mode autodiff.

Values live in numpy arrays (float32 by default). Every differentiable op
appends one node to the active :class:`Tape`; nodes are therefore stored in
topological order and :func:`backward_grad` walks them once, in reverse.

Reductions (matmul, softmax, layer norm, cross-entropy) accumulate in float64
and cast back to the input dtype. Broadcasting is limited to adding a 1-D bias
along the last axis; any other shape disagreement raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPE = np.float32

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_acc64: contextvars.ContextVar[bool] = contextvars.ContextVar("acc64", default=True)


@contextlib.contextmanager
def native_accumulation() -> Iterator[None]:
    """Run matmuls in the operand dtype instead of upcasting to float64.

    Meant for large, oracle-free workloads (decoder training) where the
    float64 round-trip would double the cost.
    """
    token = _acc64.set(False)
    try:
        yield
    finally:
        _acc64.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the primitive ops evaluated inside ``with tape:``."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def leaf(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self.leaves[name] = t
        return t

    def produced(self, t: Tensor) -> bool:
        return any(n.out is t for n in self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _emit(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(op, value)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.nodes.append(Node(op, out, parents, backward))
    return out


def _sum_to_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(g.dtype)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g, n)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b) -> Tensor:
    return add(a, mul(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors, or tensor times a Python scalar."""
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a, c = as_tensor(a), b
        return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.data, b.data
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _emit("gelu", y.astype(v.dtype), (x,), back)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: index out of range")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), back)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D tensor (used to pick answer positions)."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, rows, g)
        return (gx,)

    return _emit("take_rows", x.data[rows], (x,), back)


# ---------------------------------------------------------------- reductions


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _acc64.get() and a.dtype == np.float32:
        return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``b`` (weights) or equal batch dims on both sides."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if bv.ndim == 2:
        def back(g):
            ga = _mm(g, bv.T)
            gb = _mm(av.reshape(-1, av.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            return ga, gb
    elif av.shape[:-2] == bv.shape[:-2]:
        def back(g):
            return _mm(g, np.swapaxes(bv, -1, -2)), _mm(np.swapaxes(av, -1, -2), g)
    else:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    return _emit("matmul", _mm(av, bv), (a, b), back)


def total(x: Tensor) -> Tensor:
    dt = x.dtype
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(dtype=np.float64), dtype=dt), (x,),
                 lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    return mul(total(x), 1.0 / max(1, x.data.size))


def softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` masks keys above the diagonal."""
    v = x.data.astype(np.float64)
    if causal:
        t = v.shape[-1]
        if v.ndim < 2 or v.shape[-2] != t:
            raise ShapeError("causal softmax needs square trailing dims")
        v = np.where(np.triu(np.ones((t, t), dtype=bool), 1), -np.inf, v)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.dtype)

    def back(g):
        g64 = g.astype(np.float64)
        gx = y64 * (g64 - (g64 * y64).sum(axis=-1, keepdims=True))
        return (gx.astype(g.dtype),)

    return _emit("softmax", y, (x,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layernorm: gain/bias must match the last axis")
    v = x.data.astype(np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    y = (xhat * gain.data + bias.data).astype(x.dtype)
    gv = gain.data.astype(np.float64)

    def back(g):
        g64 = g.astype(np.float64)
        ggain = (g64 * xhat).reshape(-1, n).sum(axis=0)
        gbias = g64.reshape(-1, n).sum(axis=0)
        dxhat = g64 * gv
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dt = g.dtype
        return gx.astype(dt), ggain.astype(dt), gbias.astype(dt)

    return _emit("layernorm", y, (x, gain, bias), back)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``.

    ``target`` holds one probability distribution per row (soft labels allowed).
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {y.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = z.shape[0]
    loss = -(y * logp).sum() / rows
    p = np.exp(logp)
    dt = logits.dtype

    def back(g):
        return (((p - y) * (float(g) / rows)).astype(dt),)

    return _emit("cross_entropy", np.asarray(loss, dtype=dt), (logits,), back)


# ---------------------------------------------------------------- driver API


def forward_eval(fn: Callable[..., Mapping[str, Tensor] | Tensor],
                 inputs: Mapping[str, np.ndarray]) -> tuple[dict[str, Tensor], Tape]:
    """Evaluate ``fn`` on fresh leaves built from ``inputs``.

    Returns the named outputs and the tape recorded while computing them.
    Inputs are copied, so the caller's arrays are never mutated.
    """
    with Tape() as tape:
        leaves = {k: tape.leaf(k, v) for k, v in inputs.items()}
        out = fn(**leaves)
    if isinstance(out, Tensor):
        out = {"out": out}
    return dict(out), tape


def backward_grad(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every named leaf of ``tape``."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    is_leaf = any(loss is t for t in tape.leaves.values())
    if not is_leaf and not tape.produced(loss):
        raise ValueError("loss node is not connected to this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        _check_finite(f"gradient of {name}", g)
        out[name] = g.reshape(leaf.shape)
    return out


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                     eps: float = 1e-3, coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    The step for coordinate i is ``eps * max(1, |p_i|)``. With ``coords`` only
    those flat indices are evaluated and a 1-D array in that order is
    returned; otherwise the result has the shape of ``params``. Pass float64
    params for an oracle that is not limited by float32 rounding.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(params, copy=True)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.empty(len(idx), dtype=np.float64)

    def f(p):
        v = float(loss_fn(p))
        if not math.isfinite(v):
            raise NonFiniteError("loss evaluation returned a non-finite value")
        return v

    for j, i in enumerate(idx):
        orig = flat[i]
        h = eps * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        up = f(base)
        flat[i] = orig - h
        down = f(base)
        flat[i] = orig
        out[j] = (up - down) / (2 * h)
    if coords is None:
        return out.reshape(base.shape)
    return out


def grad_close(analytic, numeric, abs_tol: float = 1e-4, rel_tol: float = 1e-3) -> np.ndarray:
    """Elementwise ``|a - n| <= max(abs_tol, rel_tol * |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) <= np.maximum(abs_tol, rel_tol * np.abs(n))
