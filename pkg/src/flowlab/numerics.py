"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor`; nothing on a recorded graph is
modified in place. The graph built by a forward pass is the tape:
:func:`backward` orders it topologically and replays the local backward rules
in reverse.

Binary elementwise operations accept equal shapes, or one rank-0 operand.
Anything else (bias rows, per-channel embeddings) goes through a dedicated op
with its own backward rule, which keeps every rule short enough to audit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class NumericsError(ValueError):
    """Shape, domain or finiteness violation in a tensor operation."""


class Tensor:
    """An immutable float64 array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"{op}: non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(shape):
    raise NumericsError(f"expected a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op}: non-finite values")
    # Fresh op output: no defensive copy needed.
    t = Tensor.__new__(Tensor)
    data.flags.writeable = False
    t.data = data
    t.grad = None
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad, t._parents, t._backward = True, tuple(parents), backward
    else:
        t.requires_grad, t._parents, t._backward = False, (), None
    return t


# ---------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise NumericsError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Only rank-0 broadcasting exists, so the reduction is a full sum.
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericsError("div: division by zero")
    out = ad / bd
    return _result(out, (a, b), lambda g: (_reduce_to(g / bd, a.shape), _reduce_to(-g * out / bd, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericsError("log: argument must be positive")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericsError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)

    def back(g):
        if np.any(out == 0):
            raise NumericsError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return _result(out, (a,), back, "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


_UNARY = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "tanh": tanh, "relu": relu, "silu": silu, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply the named elementwise op; ``b`` is required for binary ops."""
    if op in _BINARY:
        if b is None:
            raise NumericsError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise NumericsError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise NumericsError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``b`` of shape (out,) added to every row."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise NumericsError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _result(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise NumericsError(f"linear: bias shape {b.shape} does not match {w.shape[1]}")
    return _result(out + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(0)), "linear")


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    if not isinstance(axis, (int, np.integer)) or not -a.ndim <= axis < a.ndim:
        raise NumericsError(f"invalid axis {axis} for shape {a.shape}")
    return int(axis) % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    return _result(
        a.data.sum(axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum"
    )


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        n = a.size
        if n == 0:
            raise NumericsError("mean of empty tensor")
        return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),), "mean")
    n = shape[axis]
    return _result(
        a.data.mean(axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),), "mean"
    )


def reduce(op: str, a, axis: int | None = None) -> Tensor:
    if op == "sum":
        return sum(a, axis)
    if op == "mean":
        return mean(a, axis)
    raise NumericsError(f"unknown reduction {op!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise NumericsError(f"reshape: {exc}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# image ops (N, C, H, W)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution with an odd square kernel.

    ``x`` is (B, C, H, W), ``w`` is (O, C, k, k) and ``b`` is (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise NumericsError(f"conv2d: incompatible shapes {x.shape} * {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    pad = k // 2
    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        cols = kernels.im2col(x.data, k, pad)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, H, W, O)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise NumericsError(f"conv2d: bias shape {b.shape} does not match {O} channels")
        out = out + b.data
        parents.append(b)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = gm @ wmat
        if k == 1:
            gx = np.ascontiguousarray(gcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        else:
            gx = kernels.col2im(gcols, (B, C, H, W), k, pad)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(0)

    return _result(out, parents, back, "conv2d")


def add_channel(x, e) -> Tensor:
    """Add a per-sample, per-channel vector ``e`` (B, C) to ``x`` (B, C, H, W)."""
    x, e = as_tensor(x), as_tensor(e)
    if x.ndim != 4 or e.shape != x.shape[:2]:
        raise NumericsError(f"add_channel: shapes {x.shape} and {e.shape} do not align")
    return _result(x.data + e.data[:, :, None, None], (x, e), lambda g: (g, g.sum((2, 3))), "add_channel")


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise NumericsError(f"avg_pool2: spatial size {H}x{W} is not even")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean((3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), back, "avg_pool2")


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum((3, 5)),), "upsample2")


# ---------------------------------------------------------------------------
# tape


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: list


def gradient_check(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-6, tol: float = 1e-5, floor: float = 1e-2):
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of each component is ``|a - n| / max(|a|, |n|, floor)``,
    so components with magnitude below ``floor`` are held to an absolute bound.
    """
    if h <= 0:
        raise NumericsError("h must be positive")
    base = [np.array(as_tensor(x).data) for x in inputs]

    def evaluate(arrays):
        out = f(*[Tensor(a) for a in arrays])
        return float(as_tensor(out).item())

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise NumericsError("gradient_check: f is not deterministic")

    leaves = [Tensor(a, requires_grad=True) for a in base]
    out = as_tensor(f(*leaves))
    backward(out)

    per_input = []
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base[i])
        numeric = np.zeros_like(base[i])
        flat = numeric.reshape(-1)
        for j in range(base[i].size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, tol, worst <= tol, per_input)
