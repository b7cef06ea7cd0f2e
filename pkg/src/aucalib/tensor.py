"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: eager numpy forward passes, a flat creation-ordered
tape of backward closures, and broadcasting restricted to a leading
batch axis (plus 0-d scalars) so every backward rule is an exact mirror
of its forward op. A tape and its tensors belong to one thread; separate
graphs can run concurrently because nothing mutable is shared.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward value came out NaN or infinite."""


_seq = itertools.count()
_grad_enabled = True
# When not None, kinky ops (relu, clamp) append their activation masks here
# so grad_check can detect finite-difference intervals that straddle a kink.
_kink_trace: list[np.ndarray] | None = None


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """N-dimensional float64 value, optionally tracked on the tape.

    ``grad`` accumulates across backward() calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "seqno")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _ensure_finite(arr, "tensor init")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.seqno = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
            backward_rule: Callable | None) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.seqno = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._backward = backward_rule
    else:
        out.requires_grad = False
        out.op = op
        out.parents = ()
        out._backward = None
    return out


# -- broadcasting ------------------------------------------------------

def _pair_mode(a: Tensor, b: Tensor) -> str:
    """Classify a binary-op shape pair.

    Allowed: identical shapes, a 0-d scalar on either side, or one
    operand equal to the other's shape minus its leading batch axis.
    """
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "b_scalar"
    if a.data.ndim == 0:
        return "a_scalar"
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return "b_lead"
    if b.data.ndim == a.data.ndim + 1 and b.shape[1:] == a.shape:
        return "a_lead"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, mode: str, side: str) -> np.ndarray:
    """Undo the broadcast of one operand when pulling its gradient back."""
    if mode == "same":
        return g
    if (mode, side) in (("b_scalar", "a"), ("a_scalar", "b"),
                        ("b_lead", "a"), ("a_lead", "b")):
        return g
    if mode in ("b_scalar", "a_scalar"):
        return np.array(g.sum())
    return g.sum(axis=0)


def _binary(a, b, op: str, fwd, da_fn, db_fn) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    mode = _pair_mode(a, b)
    out_data = fwd(a.data, b.data)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, _reduce_to(da_fn(g, a.data, b.data, out_data), mode, "a"))
        if b.requires_grad:
            accum(b, _reduce_to(db_fn(g, a.data, b.data, out_data), mode, "b"))

    return _result(out_data, op, (a, b), rule)


# -- elementwise arithmetic --------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, -g)

    return _result(-a.data, "neg", (a,), rule)


# -- nonlinearities ----------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient 0 at exactly 0
    if _kink_trace is not None:
        _kink_trace.append(mask.copy())

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), "relu", (a,), rule)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_stable(a.data)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g * s * (1.0 - s))

    return _result(s, "sigmoid", (a,), rule)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g / a.data)

    return _result(np.log(a.data), "log", (a,), rule)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g * 0.5 / root)

    return _result(root, "sqrt", (a,), rule)


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g * 2.0 * a.data)

    return _result(a.data * a.data, "square", (a,), rule)


def maximum(a: Tensor, const: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 on the clamped side."""
    a = _as_tensor(a)
    c = float(const)
    mask = a.data > c
    if _kink_trace is not None:
        _kink_trace.append(mask.copy())

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g * mask)

    return _result(np.where(mask, a.data, c), "maximum", (a,), rule)


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,n)@(n,p), got {a.shape} @ {b.shape}")

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g @ b.data.T)
        if b.requires_grad:
            accum(b, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), rule)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-d convolution: x (B,Cin,H,W) with w (Cout,Cin,k,k).

    Zero padding, square kernels, stride 1 or 2. Per-channel bias is part
    of the op so gradients for all three operands come out of one rule.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    if w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d kernels must be square")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if stride not in (1, 2):
        raise ShapeError("conv2d stride must be 1 or 2")
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B,Cin,Ho,Wo,k,k)
    out = np.einsum("bchwij,ocij->bohw", windows, w.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g, accum):
        if w.requires_grad:
            accum(w, np.einsum("bchwij,bohw->ocij", windows, g, optimize=True))
        if bias is not None and bias.requires_grad:
            accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            accum(x, gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, "conv2d", parents, rule)


# -- reductions & shape ops --------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes)

    def rule(g, accum):
        if a.requires_grad:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            accum(a, np.broadcast_to(g.reshape(shape), a.shape).copy())

    return _result(out, "sum", (a,), rule)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes)

    def rule(g, accum):
        if a.requires_grad:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            accum(a, np.broadcast_to(g.reshape(shape) / count, a.shape).copy())

    return _result(out, "mean", (a,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C), mean over the spatial extent."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-d feature map")
    return tmean(x, axis=(2, 3))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def rule(g, accum):
        if a.requires_grad:
            accum(a, g.reshape(a.shape))

    return _result(out.copy(), "reshape", (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g, accum):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accum(t, g[tuple(idx)])

    return _result(out, "concat", tuple(tensors), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def rule(g, accum):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            accum(a, buf)

    return _result(a.data[idx].copy(), "narrow", (a,), rule)


# -- backward pass -----------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss.

    Repeated calls accumulate; the tape is walked once per call in
    reverse creation order.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    order = _topo(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accum(t: Tensor, g: np.ndarray):
        key = id(t)
        if key in pending:
            pending[key] = pending[key] + g
        else:
            pending[key] = np.asarray(g, dtype=np.float64)

    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is not None:
            node._backward(g, accum)


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.seqno)
    return nodes


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- gradient checking -------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int
    skipped: int


@dataclass
class GradCheckReport:
    params: list[ParamCheck]

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def format_table(self) -> str:
        rows = [f"{'parameter':30s} {'max rel err':>12s} {'checked':>8s} {'skipped':>8s}"]
        for p in self.params:
            rows.append(f"{p.name:30s} {p.max_rel_err:12.3e} {p.checked:8d} {p.skipped:8d}")
        rows.append(f"{'TOTAL':30s} {self.max_rel_err:12.3e}")
        return "\n".join(rows)


MAX_CHECK_SCALARS = 10_000


def grad_check(builder: Callable, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``builder()`` must return ``(params, loss_fn)`` where params is an
    ordered name->Tensor mapping of requires_grad leaves and ``loss_fn()``
    rebuilds the scalar loss from the live parameter data. Elements whose
    finite-difference interval crosses a relu/clamp kink are skipped and
    reported rather than compared.
    """
    params, loss_fn = builder()
    total = sum(p.data.size for p in params.values())
    if total > MAX_CHECK_SCALARS:
        raise ValueError(f"grad_check limited to {MAX_CHECK_SCALARS} scalars, got {total}")

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError("grad_check loss must be scalar")
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    results = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        max_err, checked, skipped = 0.0, 0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, trace_p = _traced_value(loss_fn)
            flat[i] = orig - step
            f_minus, trace_m = _traced_value(loss_fn)
            flat[i] = orig
            if not _traces_match(trace_p, trace_m):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(grad_flat[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
            checked += 1
        results.append(ParamCheck(name, max_err, checked, skipped))
    return GradCheckReport(results)


def _traced_value(loss_fn) -> tuple[float, list[np.ndarray]]:
    global _kink_trace
    _kink_trace = []
    try:
        with no_grad():
            value = loss_fn().item()
        trace = _kink_trace
    finally:
        _kink_trace = None
    return value, trace


def _traces_match(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a, b))
