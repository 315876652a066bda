"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the tape in reverse topological order accumulating vector-Jacobian products.
Everything runs in float64 by default so gradients can be checked against
central finite differences at tight tolerances.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(ArithmeticError):
    """A backward pass produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(float)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def detach(self):
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Coerce python scalars to the other operand's dtype (0-d arrays would
    otherwise force float64 promotion)."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(np.asarray(b, dtype=a.data.dtype if np.isscalar(b) else None))
        return a, b
    if isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype if np.isscalar(a) else None))
        return a, b
    return as_tensor(a), as_tensor(b)


def parameter(array, dtype=float) -> Tensor:
    return Tensor(np.array(array, dtype=dtype), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate gradients of ``root`` (summed if non-scalar) into .grad."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        gout = grads.pop(id(node), None)
        if gout is None:
            continue
        if node._parents:
            for parent, gin in zip(node._parents, node._vjp(gout)):
                if not parent.requires_grad or gin is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
        else:
            # finite check at leaves only; NaN/Inf anywhere upstream lands here
            if not np.isfinite(gout).all():
                raise NonFiniteGradient("non-finite gradient during backward pass")
            node.grad = gout if node.grad is None else node.grad + gout


# ---------------------------------------------------------------------------
# arithmetic primitives

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data**2), b.data.shape) if b.requires_grad else None,
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.data**exponent,
        parents=(a,),
        vjp=lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=(a,), vjp=lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g / (2.0 * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (sig + out * (1.0 - sig)),))


# ---------------------------------------------------------------------------
# shape primitives

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        vjp=lambda g: (g.reshape(a.data.shape),),
    )


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor(
        a.data.transpose(axes),
        parents=(a,),
        vjp=lambda g: (g.transpose(inverse),),
    )


def take(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor(a.data[key], parents=(a,), vjp=vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjp=lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def pad_last(a, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.data.ndim - 1) + [(before, after)]
    length = a.data.shape[-1]
    return Tensor(
        np.pad(a.data, width),
        parents=(a,),
        vjp=lambda g: (g[..., before : before + length],),
    )


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        # read-only broadcast view; accumulation uses out-of-place adds
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), vjp=vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return Tensor(out, parents=(a, b), vjp=vjp)


def softmax_last(a) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    out = shifted
    out /= out.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, parents=(a,), vjp=vjp)


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v, fused to minimize temporaries.

    q is (..., N, d); k and v are (..., P, d); output is (..., N, d).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    inv = float(q.data.shape[-1]) ** -0.5
    weights = (q.data * inv) @ np.swapaxes(k.data, -1, -2)
    weights -= weights.max(axis=-1, keepdims=True)
    np.exp(weights, out=weights)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ v.data

    def vjp(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = _unbroadcast(np.swapaxes(weights, -1, -2) @ g, v.data.shape)
        if q.requires_grad or k.requires_grad:
            gw = g @ np.swapaxes(v.data, -1, -2)
            gz = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = _unbroadcast((gz @ k.data) * inv, q.data.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.swapaxes(gz, -1, -2) @ (q.data * inv), k.data.shape)
        return (gq, gk, gv)

    return Tensor(out, parents=(q, k, v), vjp=vjp)


# ---------------------------------------------------------------------------
# sequence operations

def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1D convolution: x (B, C, L), w (O, C, K) -> (B, O, L_out)."""
    x, w = as_tensor(x), as_tensor(w)
    batch, channels, length = x.data.shape
    out_ch, in_ch, kernel = w.data.shape
    if in_ch != channels:
        raise ValueError(f"conv1d channel mismatch: x has {channels}, w expects {in_ch}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    l_out = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, out_ch, l_out), dtype=np.result_type(x.data, w.data))
    for k in range(kernel):
        window = xp[:, :, k : k + stride * l_out : stride]
        out += np.tensordot(w.data[:, :, k], window, axes=([1], [1])).transpose(1, 0, 2)

    def vjp(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k in range(kernel):
                window = xp[:, :, k : k + stride * l_out : stride]
                gw[:, :, k] = np.tensordot(g, window, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(kernel):
                gxk = np.tensordot(w.data[:, :, k], g, axes=([0], [1])).transpose(1, 0, 2)
                gxp[:, :, k : k + stride * l_out : stride] += gxk
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        return (gx, gw)

    return Tensor(out, parents=(x, w), vjp=vjp)


def upsample_linear(x) -> Tensor:
    """Factor-2 linear upsampling of the last axis (align_corners=False)."""
    x = as_tensor(x)
    length = x.data.shape[-1]
    positions = (np.arange(2 * length) + 0.5) / 2 - 0.5
    i0 = np.clip(np.floor(positions).astype(int), 0, length - 1)
    i1 = np.clip(i0 + 1, 0, length - 1)
    w1 = np.clip(positions - np.floor(positions), 0.0, 1.0)
    w1 = np.where(positions < 0, 0.0, np.where(positions > length - 1, 0.0, w1))
    w1 = w1.astype(x.data.dtype)
    w0 = (1.0 - w1).astype(x.data.dtype)
    out = x.data[..., i0] * w0 + x.data[..., i1] * w1

    def vjp(g):
        moved = np.moveaxis(g, -1, 0)
        acc = np.zeros((length,) + moved.shape[1:], dtype=g.dtype)
        np.add.at(acc, i0, moved * w0.reshape((-1,) + (1,) * (moved.ndim - 1)))
        np.add.at(acc, i1, moved * w1.reshape((-1,) + (1,) * (moved.ndim - 1)))
        return (np.moveaxis(acc, 0, -1),)

    return Tensor(out, parents=(x,), vjp=vjp)


# ---------------------------------------------------------------------------
# normalization helpers (composed from primitives; exact gradients)

def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, L) per group of channels, no affine."""
    x = as_tensor(x)
    batch, channels, length = x.data.shape
    groups = min(groups, channels)
    if channels % groups:
        raise ValueError(f"channels {channels} not divisible by groups {groups}")
    grouped = reshape(x, (batch, groups, (channels // groups) * length))
    mu = mean(grouped, axis=-1, keepdims=True)
    centered = grouped - mu
    var = mean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(var + eps))
    return reshape(normed, (batch, channels, length))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, no affine."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(square(centered), axis=-1, keepdims=True)
    return div(centered, sqrt(var + eps))
