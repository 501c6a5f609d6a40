"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a node that remembers its parents and a closure that pushes
the output gradient back to them.  ``backward`` walks the graph once in
reverse topological order and then drops the closures, so a graph lives for
exactly one forward/backward pass.

Broadcasting is deliberately narrow: a rank-1 operand of shape ``(D,)`` may
be combined with a rank-2 operand of shape ``(B, D)`` (bias over a leading
batch dimension).  Every other shape disagreement raises :class:`ShapeError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -- each maps to one of the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        # leading-batch broadcast: fold the batch axis back onto the rank-1 operand
        g = g.sum(axis=0)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


# ---------------------------------------------------------------- linear ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), back)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return _result(ad * bd, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ bd.T)
        if b.requires_grad:
            if ad.ndim == 1:
                _accumulate(b, np.outer(ad, g))
            else:
                _accumulate(b, ad.T @ g)

    return _result(ad @ bd, (a, b), back)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all leading dimensions must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or t.shape[:-1] != lead:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    widths = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            _accumulate(t, g[..., lo:hi])

    return _result(np.concatenate([t.data for t in ts], axis=-1), ts, back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accumulate(a, full)

    return _result(a.data[..., start:stop], (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), back)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over all entries, or over ``axis`` (0 or -1) of a rank-2 tensor."""
    if axis is None:
        def back(g):
            _accumulate(a, np.broadcast_to(g, a.shape).copy())

        return _result(np.asarray(a.data.sum()), (a,), back)
    if a.data.ndim != 2 or axis not in (0, 1, -1):
        raise ShapeError(f"sum: axis={axis} unsupported for shape {a.shape}")
    ax = axis % 2

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, ax), a.shape).copy())

    return _result(a.data.sum(axis=ax), (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _accumulate(a, np.full(a.shape, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), back)


# ------------------------------------------------------------ nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out * out))

    return _result(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # gradient 0 at exactly 0

    def back(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0.0, 1.0, slope)

    def back(g):
        _accumulate(a, g * factor)

    return _result(a.data * factor, (a,), back)


def maximum(a: Tensor, c: float) -> Tensor:
    """``max(a, c)`` against a constant; the hinge of soft-margin losses."""
    mask = a.data > c

    def back(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, c), (a,), back)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0.0) or not np.all(np.isfinite(x)):
        bad = float(x.flat[np.argmax((x <= 0.0) | ~np.isfinite(x))])
        raise DomainError(f"log of non-positive value {bad!r}")

    def back(g):
        _accumulate(a, g / x)

    return _result(np.log(x), (a,), back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accumulate(a, g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), back)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between steps.  The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_error: float
    n_checked: int
    skipped: list[int] = field(default_factory=list)


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff against central differences coordinate by coordinate.

    A coordinate whose one-sided differences disagree by more than
    ``kink_tol`` (relative) sits on a non-differentiable point and is skipped.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x.requires_grad = True
    x.grad = None
    base = f(x)
    if base.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {base.shape}")
    f0 = base.item()
    if not np.isfinite(f0):
        raise FloatingPointError("non-finite function value at the unperturbed point")
    backward(base)
    auto = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    skipped: list[int] = []
    n = 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value perturbing coordinate {i}")
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(int(i))
            continue
        cd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(auto[i] - cd) / max(1.0, abs(cd)))
        n += 1
    x.grad = None
    return GradCheckReport(max_error=float(worst), n_checked=n, skipped=skipped)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, coords=None) -> float:
    """Max relative error ``|autodiff - central| / max(1, |central|)``."""
    return grad_check_report(f, x, step, coords).max_error
