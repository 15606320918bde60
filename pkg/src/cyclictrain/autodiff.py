"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op in this module computes its result eagerly and, when at least one
input requires a gradient, records the inputs plus a backward closure on the
output node.  The recorded nodes form an implicit tape: calling
``Tensor.backward()`` on a scalar walks it once in reverse topological order.
Stale gradient buffers on every reachable node are cleared before the walk,
so gradients never accumulate across two backward passes.

The op set splits in two groups:

* model primitives: ``matmul``, ``conv2d``, ``relu``, ``sigmoid``,
  ``softmax``, ``add``, ``mul``, ``mean``, ``maxpool2d``,
  ``upsample_nearest`` -- everything the network branches are built from;
* loss/glue support: ``sub``, ``neg``, ``div``, ``log``, ``softplus``,
  ``tsum``, ``reshape``, ``take_rows`` -- needed to express differentiable
  losses (cross entropy, L1, IoU ratios) on the same tape.

All arrays are float64; there is no implicit down-casting anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "softmax",
    "mean",
    "tsum",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "reshape",
    "permute",
    "take_rows",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    """An op received operands with incompatible shapes."""


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop.

    ``requires_grad=False`` tensors never receive a ``grad`` buffer; they act
    as constants (inputs, targets, frozen weights, teacher weights).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Populate ``grad`` on every reachable ``requires_grad`` tensor.

        Must be called on a scalar node.  Gradients of all reachable nodes
        are reset first, so repeated calls never accumulate across passes.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward: loss must be a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # Arithmetic sugar; every overload routes through the op functions so
    # the tape sees a uniform node vocabulary.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = grad if t.grad is None else t.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: operands do not broadcast ({a.shape} vs {b.shape})")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: operands do not broadcast ({a.shape} vs {b.shape})")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: operands do not broadcast ({a.shape} vs {b.shape})")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: operands do not broadcast ({a.shape} vs {b.shape})")

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _stable_sigmoid(a.data)

    def bwd(g):
        _accumulate(a, g * y * (1.0 - y))

    return _node(y, (a,), bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow; derivative is sigmoid."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        _accumulate(a, g * _stable_sigmoid(a.data))

    return _node(data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _node(y, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and structure


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axes)

    def bwd(g):
        gexp = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(gexp, a.data.shape) / count)

    return _node(data, (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    data = a.data.sum(axis=axes)

    def bwd(g):
        gexp = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(gexp, a.data.shape) + 0.0)

    return _node(data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), bwd)


def permute(a, axes) -> Tensor:
    """Reorder axes (numpy transpose); gradient applies the inverse order."""
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def bwd(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(data, (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices sum their gradients."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accumulate(a, buf)

    return _node(data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul: operands must be at least 2-D ({a.shape} vs {b.shape})"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape} vs {b.shape})"
        )
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout, stride 1 convolutions, zero padding)


def conv2d(x, w, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of NCHW input with OCHW kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands ({x.shape} vs {w.shape})")
    n, c, h, wid = x.data.shape
    o, ck, kh, kw = w.data.shape
    if c != ck:
        raise ShapeError(
            f"conv2d: channel mismatch (input {x.shape}, kernel {w.shape})"
        )
    ho = h + 2 * padding - kh + 1
    wo = wid + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {w.shape} does not fit input {x.shape} "
            f"with padding={padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    out = np.zeros((n, o, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            out += np.einsum(
                "nchw,oc->nohw",
                xp[:, :, di : di + ho, dj : dj + wo],
                w.data[:, :, di, dj],
                optimize=True,
            )

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + ho, dj : dj + wo] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, di, dj], optimize=True
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
            _accumulate(x, gx)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for di in range(kh):
                for dj in range(kw):
                    gw[:, :, di, dj] = np.einsum(
                        "nohw,nchw->oc", g, xp[:, :, di : di + ho, dj : dj + wo],
                        optimize=True,
                    )
            _accumulate(w, gw)

    return _node(out, (x, w), bwd)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ShapeError(
            f"maxpool2d: spatial dims {h}x{w} not divisible by window {size}"
        )
    ho, wo = h // size, w // size
    windows = (
        x.data.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, ho, wo, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        _accumulate(x, gx)

    return _node(out, (x,), bwd)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-D input, got {x.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g):
        gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        _accumulate(x, gx)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    """Per-parameter max relative error of backward vs central differences.

    Relative error uses ``|a - n| / max(1, |a|, |n|)`` per element; frozen
    (``requires_grad=False``) parameters are listed but carry no error entry.
    """

    errors: dict[str, float]
    frozen: tuple[str, ...]
    tolerance: float
    step: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"grad check: max rel error {self.max_error:.3e} "
                 f"(tolerance {self.tolerance:.1e})"]
        for name in sorted(self.errors):
            lines.append(f"  {name}: {self.errors[name]:.3e}")
        if self.frozen:
            lines.append(f"  frozen (not checked): {', '.join(sorted(self.frozen))}")
        return "\n".join(lines)


def grad_check(model_builder, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    ``model_builder()`` must return ``(params, loss_fn)`` where ``params``
    maps names to leaf tensors and ``loss_fn()`` rebuilds and returns the
    scalar loss from the current parameter values.  Models above 5000
    checkable parameters are rejected; finite differencing is quadratic.
    """
    params, loss_fn = model_builder()
    trainable = {n: t for n, t in params.items() if t.requires_grad}
    n_checked = sum(t.data.size for t in trainable.values())
    if n_checked >= 5000:
        raise ValueError(
            f"grad_check: {n_checked} checkable parameters, limit is 5000"
        )
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in trainable.items()
    }
    errors: dict[str, float] = {}
    for name, t in trainable.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn().item()
            flat[i] = orig - step
            minus = loss_fn().item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        errors[name] = worst
    frozen = tuple(n for n in params if n not in trainable)
    return GradCheckReport(errors=errors, frozen=frozen, tolerance=tolerance, step=step)
