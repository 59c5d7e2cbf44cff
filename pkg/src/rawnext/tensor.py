"""Minimal reverse-mode autodiff engine on numpy arrays.

Tensors are rank <= 3 (batch x channel x time at most) and carry float32 or
float64 data. Every differentiable kernel records a backward closure on its
output; ``backward()`` runs the closures in reverse topological order and
accumulates gradients into ``Tensor.grad``. There is no graph optimization,
no broadcasting beyond what the kernels declare, and no 2-D convolution:
only the kernels this architecture actually uses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense real array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ValueError(f"tensors are rank <= 3, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar; grads accumulate until reset."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = _toposort(self)
        seed = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    __radd__ = __add__
    __rmul__ = __mul__


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via iterative DFS (graphs can be deep)."""
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
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _record(out_data, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires, name=name)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions numpy broadcasting added or expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest graph node holding NaN/Inf, or None if clean."""
    for node in _toposort(root):
        if not np.isfinite(node.data).all():
            return node.name or "<unnamed>"
    return None


# ---------------------------------------------------------------------------
# elementwise and reduction kernels
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting product; covers channel-map-over-time scaling."""
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1 - out * out),)

    return _record(out, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _record(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g / (2 * out),)

    return _record(out, (a,), backward, "sqrt")


def clamp_min(a: Tensor, low: float) -> Tensor:
    out = np.maximum(a.data, low)

    def backward(g):
        return (g * (a.data >= low),)

    return _record(out, (a,), backward, "clamp_min")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    ))

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype) / count,)

    return _record(out, (a,), backward, "mean")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype).copy(),)

    return _record(out, (a,), backward, "sum")


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), backward, "softmax")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        for d in range(len(ref)):
            if d != axis % len(ref) and t.shape[d] != ref[d]:
                raise ValueError(
                    f"concat shape mismatch on dim {d}: {t.shape} vs {ref}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward, "slice")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _record(out, (a,), backward, "transpose")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight of shape (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape[-1]} != weight in_features "
            f"{weight.shape[1]}"
        )
    out = np.matmul(x.data, weight.data.T)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = np.matmul(g, weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        dw = g2.T @ x2
        if bias is None:
            return dx, dw
        db = g2.sum(axis=0)
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution / pooling kernels (1-D, grouped)
# ---------------------------------------------------------------------------

def conv_out_len(t: int, k: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - k) // stride + 1


def _check_conv_shapes(x: Tensor, weight: Tensor, groups: int) -> None:
    if x.ndim != 3:
        raise ValueError(f"conv1d expects (batch, channels, time), got {x.shape}")
    b, cin, t = x.shape
    cout, cin_g, k = weight.shape
    if cin % groups != 0:
        raise ValueError(f"input channels {cin} (dim 1) not divisible by groups {groups}")
    if cout % groups != 0:
        raise ValueError(f"output channels {cout} (weight dim 0) not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"weight in-channel dim {cin_g} (weight dim 1) != input channels "
            f"{cin} / groups {groups}"
        )


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 1-D convolution via k shifted batched matmuls (BLAS-bound)."""
    _check_conv_shapes(x, weight, groups)
    b, cin, t = x.shape
    cout, cin_g, k = weight.shape
    lout = conv_out_len(t, k, stride, padding)
    if lout <= 0:
        raise ValueError(
            f"conv1d: time length {t} too short for kernel {k} stride {stride} "
            f"padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    else:
        xp = x.data
    xg = xp.reshape(b, groups, cin_g, xp.shape[2])
    wg = weight.data.reshape(groups, cout // groups, cin_g, k)
    span = stride * (lout - 1) + 1
    out = np.zeros((b, groups, cout // groups, lout), dtype=x.dtype)
    for j in range(k):
        out += np.matmul(wg[:, :, :, j], xg[:, :, :, j : j + span : stride])
    out = out.reshape(b, cout, lout)
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gg = g.reshape(b, groups, cout // groups, lout)
        if padding:
            xpb = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
        else:
            xpb = x.data
        xgb = xpb.reshape(b, groups, cin_g, xpb.shape[2])
        dw = np.empty_like(weight.data).reshape(groups, cout // groups, cin_g, k)
        dxp = np.zeros((b, groups, cin_g, xpb.shape[2]), dtype=x.dtype)
        for j in range(k):
            xs = xgb[:, :, :, j : j + span : stride]
            dw[:, :, :, j] = np.matmul(gg, xs.transpose(0, 1, 3, 2)).sum(axis=0)
            dxp[:, :, :, j : j + span : stride] += np.matmul(
                wg[:, :, :, j].transpose(0, 2, 1), gg
            )
        dx = dxp.reshape(b, cin, xpb.shape[2])
        if padding:
            dx = dx[:, :, padding : padding + t]
        dw = dw.reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward, "conv1d")


def conv1d_transposed(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    groups: int = 1,
) -> Tensor:
    """Transposed 1-D convolution; weight is (in_ch, out_ch/groups, k)."""
    if stride <= 0:
        raise ValueError(f"conv1d_transposed: stride must be positive, got {stride}")
    if x.ndim != 3:
        raise ValueError(f"conv1d_transposed expects (batch, channels, time), got {x.shape}")
    b, cin, l = x.shape
    cin_w, cout_g, k = weight.shape
    if cin_w != cin:
        raise ValueError(
            f"weight in-channel dim {cin_w} (weight dim 0) != input channels {cin}"
        )
    if cin % groups != 0:
        raise ValueError(f"input channels {cin} (dim 1) not divisible by groups {groups}")
    cout = cout_g * groups
    tout = (l - 1) * stride + k
    xg = x.data.reshape(b, groups, cin // groups, l)
    wg = weight.data.reshape(groups, cin // groups, cout_g, k)
    span = stride * (l - 1) + 1
    out = np.zeros((b, groups, cout_g, tout), dtype=x.dtype)
    for j in range(k):
        out[:, :, :, j : j + span : stride] += np.matmul(
            wg[:, :, :, j].transpose(0, 2, 1), xg
        )
    out = out.reshape(b, cout, tout)
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gg = g.reshape(b, groups, cout_g, tout)
        dx = np.zeros_like(xg)
        dw = np.empty_like(weight.data).reshape(groups, cin // groups, cout_g, k)
        for j in range(k):
            gs = gg[:, :, :, j : j + span : stride]
            dx += np.matmul(wg[:, :, :, j], gs)
            dw[:, :, :, j] = np.matmul(xg, gs.transpose(0, 1, 3, 2)).sum(axis=0)
        dxf = dx.reshape(b, cin, l)
        dwf = dw.reshape(weight.shape)
        if bias is None:
            return dxf, dwf
        return dxf, dwf, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward, "conv1d_transposed")


def _pool_windows(data: np.ndarray, k: int, stride: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(data, k, axis=2)
    return windows[:, :, ::stride]


def avgpool1d(x: Tensor, k: int, stride: int) -> Tensor:
    b, c, t = x.shape
    if t < k:
        raise ValueError(f"input shorter than pooling window: {t} < {k}")
    lout = (t - k) // stride + 1
    out = _pool_windows(x.data, k, stride)[:, :, :lout].mean(axis=-1)

    def backward(g):
        dx = np.zeros_like(x.data)
        span = stride * (lout - 1) + 1
        share = g / k
        for j in range(k):
            dx[:, :, j : j + span : stride] += share
        return (dx,)

    return _record(out, (x,), backward, "avgpool1d")


def maxpool1d(x: Tensor, k: int, stride: int) -> Tensor:
    b, c, t = x.shape
    if t < k:
        raise ValueError(f"input shorter than pooling window: {t} < {k}")
    lout = (t - k) // stride + 1
    windows = _pool_windows(x.data, k, stride)[:, :, :lout]
    argmax = windows.argmax(axis=-1)  # first index on ties
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        mask = np.arange(k) == argmax[..., None]
        contrib = g[..., None] * mask
        dx = np.zeros_like(x.data)
        span = stride * (lout - 1) + 1
        for j in range(k):
            dx[:, :, j : j + span : stride] += contrib[..., j]
        return (dx,)

    return _record(out, (x,), backward, "maxpool1d")


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (batch, time)."""
    b, c, t = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm1d: gamma/beta length must equal channel count {c}, "
            f"got {gamma.shape} / {beta.shape}"
        )
    n = b * t
    if n == 0:
        raise ValueError("batchnorm1d: zero batch x time extent")
    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None]) * inv_std[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data[:, None]
        if training:
            m1 = dxhat.mean(axis=(0, 2), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv_std[:, None]
        return dx.astype(x.dtype), dgamma, dbeta

    return _record(out, (x, gamma, beta), backward, "batchnorm1d")


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between logits (B, K) and integer labels (B,)."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label out of range: values must be in [0, {k}), "
            f"got min {labels.min()} max {labels.max()}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    target = shifted[np.arange(b), labels]
    out = (lse - target).mean()

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(b), labels] -= 1.0
        return (probs * (g / b),)

    return _record(
        np.asarray(out, dtype=logits.dtype), (logits,), backward, "cross_entropy"
    )


# ---------------------------------------------------------------------------
# parameter container
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named trainable tensors with deterministic lexicographic order."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: dict[str, Tensor] = {}
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.name = name
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return sorted(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._items):
            yield name, self._items[name]

    def tensors(self) -> Iterator[Tensor]:
        for _, tensor in self.items():
            yield tensor

    def zero_grad(self) -> None:
        for tensor in self._items.values():
            tensor.grad = None
