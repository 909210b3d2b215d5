"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar orders the recorded nodes into a :class:`Tape`
(parents before children) and walks it once in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradCheckReport",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "leaky_relu",
    "activation",
    "softmax_rows",
    "concat_channels",
    "concat",
    "cross_entropy",
    "cosine_similarity",
    "reshape",
    "transpose",
    "slice_rows",
    "sum",
    "mean",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "",
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, _lift(other))

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

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    # Constant subgraphs are not recorded.
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# kink monitor used by grad_check to skip coordinates that straddle a ReLU
# --------------------------------------------------------------------------

_monitor = threading.local()


def _record_kink(pre: np.ndarray) -> None:
    log = getattr(_monitor, "log", None)
    if log is not None:
        log.append(pre > 0)


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(out, (a, b), fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    A, B = a.data, b.data

    def fn(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _make(out, (a, b), fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    _record_kink(x.data)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    _record_kink(x.data)
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def activation(x: Tensor, kind: str = "relu", slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind in ("identity", "none"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; entries where ``mask`` is False get probability 0."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax mask {mask.shape} does not match {z.shape}")
        if z.shape[1] and not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row has no allowed entries")
        z = np.where(mask, z, -np.inf)
    if z.size == 0:
        return _make(np.zeros_like(z), (x,), lambda g: (np.zeros_like(g),), "softmax")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), fn, "softmax")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one tensor")
    nd = parts[0].ndim
    ax = axis % nd
    lead = [p.shape[:ax] + p.shape[ax + 1:] for p in parts]
    if any(s != lead[0] for s in lead):
        raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[ax] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(out, tuple(parts), fn, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.shape

    def fn(g):
        out = np.zeros(src)
        out[start:stop] = g
        return (out,)

    return _make(x.data[start:stop].copy(), (x,), fn, "slice")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, max(x.data.size, 1)
    return _make(np.asarray(x.data.mean() if x.data.size else 0.0), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects P x L logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    P, L = logits.shape
    if t.shape[0] != P:
        raise ShapeError(f"cross_entropy: {P} logit rows but {t.shape[0]} targets")
    if P and (t.min() < 0 or t.max() >= L):
        raise ValueError(f"cross_entropy: target index out of range [0, {L})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(P)
    loss = float((logsum - z[rows, t]).mean()) if P else 0.0

    def fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, t] -= 1.0
        return (p * (g / max(P, 1)),)

    return _make(np.asarray(loss), (logits,), fn, "cross_entropy")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (M x D) and ``b`` (N x D)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible {a.shape} and {b.shape}")
    A, B = a.data, b.data
    na = np.sqrt((A * A).sum(axis=1)) + eps
    nb = np.sqrt((B * B).sum(axis=1)) + eps
    U, V = A / na[:, None], B / nb[:, None]
    S = U @ V.T

    ra = np.where(na - eps > 0, na - eps, 1.0)
    rb = np.where(nb - eps > 0, nb - eps, 1.0)

    def fn(g):
        # d(a / (|a| + eps)) applied to the row gradient
        gu = g @ V
        gv = g.T @ U
        ga = gu / na[:, None] - U * ((gu * U).sum(axis=1) / ra)[:, None]
        gb = gv / nb[:, None] - V * ((gv * V).sum(axis=1) / rb)[:, None]
        return ga, gb

    return _make(S, (a, b), fn, "cosine")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded nodes in topological order (every parent precedes its child)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
        if not self.nodes:
            return {}
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result: dict[Tensor, np.ndarray] = {}
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.data)
            result[node] = g
            if not node._parents:
                node.grad = g
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a mapping from each recorded tensor to its gradient.  Gradients
    are recomputed from scratch on each call, so repeated calls on the same
    graph give identical results.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    return Tape.record(loss).backward()


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    skipped: int
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def _eval_with_kinks(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    _monitor.log = []
    try:
        value = f(*inputs).item()
        return value, _monitor.log
    finally:
        _monitor.log = None


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences for every input coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  A coordinate is
    skipped when the ``+step`` and ``-step`` evaluations put any ReLU input on
    different sides of its kink.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst, checked, skipped = 0.0, 0, 0
    failures = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp, kp = _eval_with_kinks(f, inputs)
            flat[i] = orig - step
            fm, km = _eval_with_kinks(f, inputs)
            flat[i] = orig
            if len(kp) != len(km) or any(not np.array_equal(x, y) for x, y in zip(kp, km)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            ana = float(analytic[k].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst:
                worst = err
            if err > tol:
                failures.append((k, np.unravel_index(i, t.shape), ana, num))
    return GradCheckReport(worst, tol, checked, skipped, failures)
