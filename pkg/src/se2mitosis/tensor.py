"""Minimal dense tensor with reverse-mode automatic differentiation.

Every differentiable operation is a plain function that takes ``Tensor``
arguments, computes its result with numpy and records a closure mapping
the output gradient to the gradients of its parents.  ``Tensor.backward``
walks the recorded graph in a fixed reverse topological order, so repeated
runs accumulate gradients in the same order and are bit-identical.

Training buffers are float32; the gradient and oracle tests run the very
same code in float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "add",
    "mul",
    "sum_all",
    "reshape",
    "rot90",
    "roll",
    "concat",
    "conv2d_valid",
    "max_pool2",
    "batch_norm",
    "leaky_relu",
    "linear",
    "channel_linear",
    "bce_with_logits",
    "sigmoid",
]

class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Array node of a computation graph.

    Parameters
    ----------
    data : array-like
        Values; stored as a numpy array in row-major order.
    requires_grad : bool
        Whether gradients are tracked for this tensor.
    name : str, optional
        Label used in diagnostics (optimizer errors, checkpoints).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    # iterative DFS; parents visited in recorded order -> deterministic
    order, seen = [], set()
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=as_tensor(a).dtype))
    a = as_tensor(a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def rot90(a: Tensor, k: int = 1, axes=(-2, -1)) -> Tensor:
    """Quarter turns of the plane spanned by ``axes`` (exact permutation)."""
    out = np.ascontiguousarray(np.rot90(a.data, k, axes=axes))

    def backward(g):
        return (np.rot90(g, -k, axes=axes),)

    return _make(out, (a,), backward)


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    out = np.roll(a.data, shift, axis=axis)

    def backward(g):
        return (np.roll(g, -shift, axis=axis),)

    return _make(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        ax = axis % g.ndim
        return tuple(
            g[(slice(None),) * ax + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, parts, backward)


def sigmoid(z):
    """Numerically stable logistic function on a numpy array."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    """``x`` where ``x >= 0`` else ``alpha * x``; subgradient 1 at 0."""
    x = as_tensor(x)
    a = x.dtype.type(alpha)
    scaled = x.data * a
    out = np.maximum(x.data, scaled) if alpha <= 1 else np.minimum(x.data, scaled)
    neg = x.data < 0

    def backward(g):
        slope = neg.astype(g.dtype)
        slope *= g.dtype.type(alpha - 1.0)
        slope += 1
        return (g * slope,)

    return _make(out, (x,), backward)


def channel_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum over every axis except ``axis`` (fixed two-stage order)."""
    axis %= a.ndim
    c = a.shape[axis]
    lead = int(np.prod(a.shape[:axis], dtype=np.int64))
    return a.reshape(lead, c, -1).sum(axis=2).sum(axis=0)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


# inputs with at most this many values per window are unrolled (im2col)
# into a single matrix product; wider inputs accumulate one product per tap
_UNROLL_MAX = 64


def conv2d_valid(x, kernel, bias=None) -> Tensor:
    """Valid cross-correlation, stride 1.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x kH x kW``; ``bias`` has length ``C_out``.

    The batch is laid out channel-major as one ``C x (B*H*W)`` matrix.  A
    kernel tap ``(di, dj)`` then reads the contiguous column block shifted by
    ``di*W + dj``; columns whose window wraps across a row or image boundary
    are computed and discarded.  Taps are accumulated in row-major order.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be C_out x C_in x kH x kW, got {kernel.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError(f"input must be C x H x W or B x C x H x W, got {x.shape}")
    b, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c or h < kh or w < kw:
        raise ShapeError(f"cannot convolve input {x.shape} with kernel {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    total = b * h * w
    span = total - (kh - 1) * w - (kw - 1)
    offsets = [di * w + dj for di in range(kh) for dj in range(kw)]
    dtype = np.result_type(xd, kernel.data)
    xf = np.ascontiguousarray(xd.transpose(1, 0, 2, 3), dtype=dtype).reshape(c, total)
    unroll = c * kh * kw <= _UNROLL_MAX
    if unroll:
        wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1), dtype=dtype).reshape(co, kh * kw * c)
        cols = np.empty((kh * kw, c, span), dtype=dtype)
        for t, off in enumerate(offsets):
            cols[t] = xf[:, off:off + span]
        cols = cols.reshape(kh * kw * c, span)
        acc = np.zeros((co, total), dtype=dtype)
        np.matmul(wmat, cols, out=acc[:, :span])
    else:
        taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1), dtype=dtype).reshape(kh * kw, co, c)
        acc = np.zeros((co, total), dtype=dtype)
        tmp = np.empty((co, span), dtype=dtype)
        for t, off in enumerate(offsets):
            np.matmul(taps[t], xf[:, off:off + span], out=tmp)
            acc[:, :span] += tmp
    out = acc.reshape(co, b, h, w)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        gpad = np.zeros((co, b, h, w), dtype=dtype)
        gpad[:, :, :ho, :wo] = g4.transpose(1, 0, 2, 3)
        gf = gpad.reshape(co, total)[:, :span]
        gx = gk = None
        if unroll:
            if kernel.requires_grad:
                gk = (gf @ cols.T).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
            if x.requires_grad:
                gcols = (wmat.T @ gf).reshape(kh * kw, c, span)
                gx = np.zeros((c, total), dtype=dtype)
                for t, off in enumerate(offsets):
                    gx[:, off:off + span] += gcols[t]
        else:
            if kernel.requires_grad:
                gw = np.empty((kh * kw, co, c), dtype=dtype)
                for t, off in enumerate(offsets):
                    np.matmul(gf, xf[:, off:off + span].T, out=gw[t])
                gk = gw.reshape(kh, kw, co, c).transpose(2, 3, 0, 1)
            if x.requires_grad:
                gx = np.zeros((c, total), dtype=dtype)
                tmp_x = np.empty((c, span), dtype=dtype)
                for t, off in enumerate(offsets):
                    np.matmul(taps[t].T, gf, out=tmp_x)
                    gx[:, off:off + span] += tmp_x
        if gx is not None:
            gx = gx.reshape(c, b, h, w).transpose(1, 0, 2, 3)
            if unbatched:
                gx = gx[0]
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward)


def max_pool2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes.

    A trailing odd row/column is dropped.  The gradient goes to the first
    maximal element of each window in row-major scan order.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"max_pool2 needs spatial axes, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"spatial extent {h}x{w} is smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    quads = [x.data[..., di:2 * ho:2, dj:2 * wo:2] for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1))]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # winner masks: first quadrant (scan order) attaining the maximum
    masks, taken = [], None
    for q in range(3):
        hit = quads[q] == out
        if taken is not None:
            hit &= ~taken
            taken |= hit
        else:
            taken = hit.copy()
        masks.append(hit)
    masks.append(~taken)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for (di, dj), hit in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            np.multiply(g, hit, out=gx[..., di:2 * ho:2, dj:2 * wo:2])
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization / dense layers / loss
# ---------------------------------------------------------------------------


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               channel_axis: int = 1) -> Tensor:
    """Batch normalization over every axis except ``channel_axis``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place with an exponential moving average
    (unbiased variance).  In inference mode the running statistics are used.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ax = channel_axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    n = x.data.size // x.shape[ax]
    if training:
        if n < 2:
            raise ShapeError(f"training-mode batch norm needs >= 2 values per channel, got {n}")
        mean = channel_sum(x.data, ax) / x.dtype.type(n)
        xc = x.data - mean.reshape(bshape)
        var = channel_sum(xc * xc, ax) / x.dtype.type(n)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
        xc = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape).astype(x.dtype) + beta.data.reshape(bshape).astype(x.dtype)

    def backward(g):
        gg = channel_sum(g * xhat, ax)
        gb = channel_sum(g, ax)
        scale = (gamma.data * inv_std).astype(g.dtype).reshape(bshape)
        if training:
            # d/dx of gamma * xhat through the batch statistics
            gx = (g - (gb / n).reshape(bshape) - xhat * (gg / n).reshape(bshape)) * scale
        else:
            gx = g * scale
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map of ``N x F_in`` input with ``F_out x F_in`` weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def channel_linear(x, weight, bias=None) -> Tensor:
    """Fully connected layer applied at every spatial site (a 1x1 convolution).

    ``x`` is ``B x F_in x H x W``; returns ``B x F_out x H x W``.  On a 1x1
    spatial extent this equals :func:`linear`.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    b, f, h, w = x.shape
    flat = reshape(_move_channels_last(x), (b * h * w, f))
    y = linear(flat, weight, bias)
    return _move_channels_first(reshape(y, (b, h, w, weight.shape[0])))


def _move_channels_last(x: Tensor) -> Tensor:
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def backward(g):
        return (g.transpose(0, 3, 1, 2),)

    return _make(out, (x,), backward)


def _move_channels_first(x: Tensor) -> Tensor:
    out = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2))

    def backward(g):
        return (g.transpose(0, 2, 3, 1),)

    return _make(out, (x,), backward)


def bce_with_logits(logit, label) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logit)`` against 0/1 labels.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` which cannot overflow.
    """
    z = as_tensor(logit)
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"label shape {y.shape} does not match logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    zd = z.data
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size
    out = np.asarray(per.mean(), dtype=z.dtype)

    def backward(g):
        return ((sigmoid(zd) - y) * (g / n),)

    return _make(out, (z,), backward)
