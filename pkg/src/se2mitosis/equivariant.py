"""Discrete roto-translation (SE(2,N)) equivariant layers.

Group feature maps carry an orientation axis of length ``N`` in front of
the channel axis: ``N x C x H x W`` (or ``B x N x C x H x W`` batched).
Orientation ``i`` corresponds to a counterclockwise rotation by
``i * 360 / N`` degrees, where counterclockwise refers to the image as
displayed (row index growing downwards).  A rotation by a quarter turn is
therefore ``np.rot90`` on the two trailing axes.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, channel_sum, concat, conv2d_valid, reshape, roll, rot90

__all__ = [
    "rotation_matrix",
    "rotate_kernel_planar",
    "lifting_conv",
    "group_conv",
    "lifting_conv_reference",
    "group_conv_reference",
    "orientation_max_project",
    "rot90_group",
]

_SNAP = 1e-9


def _bilinear_rotation(theta: float, k: int) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    ctr = (k - 1) / 2.0
    mat = np.zeros((k * k, k * k), dtype=np.float64)
    for r in range(k):
        for col in range(k):
            x, y = col - ctr, r - ctr
            sx = x * c - y * s + ctr
            sy = x * s + y * c + ctr
            if abs(sx - round(sx)) < _SNAP:
                sx = float(round(sx))
            if abs(sy - round(sy)) < _SNAP:
                sy = float(round(sy))
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            for yy, xx, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                                (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
                if wgt != 0.0 and 0 <= yy < k and 0 <= xx < k:
                    mat[r * k + col, yy * k + xx] += wgt
    return mat


def _quarter_turn_rows(k: int) -> np.ndarray:
    # row permutation P with (P @ K.ravel()) == np.rot90(K).ravel()
    return np.rot90(np.arange(k * k).reshape(k, k)).ravel()


@lru_cache(maxsize=None)
def rotation_matrix(i: int, n: int, k: int) -> np.ndarray:
    """``k*k x k*k`` matrix rotating a flattened ``k x k`` kernel by ``i * 360 / n``.

    Each output pixel samples the input at the inversely rotated position
    with bilinear interpolation; samples outside the support read as zero.
    When ``n`` is a multiple of 4, orientation ``r + q*n/4`` is built as
    orientation ``r`` followed by ``q`` exact quarter-turn permutations, so
    quarter turns compose exactly.
    """
    if not 0 <= i < n:
        raise ValueError(f"orientation index {i} outside [0, {n})")
    if n % 4 == 0 and i >= n // 4:
        mat = rotation_matrix(i - n // 4, n, k)[_quarter_turn_rows(k)]
    else:
        mat = _bilinear_rotation(2.0 * math.pi * i / n, k)
    mat = np.array(mat)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=None)
def _rotation_stack(n: int, k: int) -> np.ndarray:
    out = np.stack([rotation_matrix(i, n, k) for i in range(n)])
    out.setflags(write=False)
    return out


def _check_square(shape):
    if shape[-1] != shape[-2]:
        raise ShapeError(f"kernel must be square, got spatial shape {shape[-2:]}")


def rotate_kernel_planar(kernel, i: int, n: int) -> Tensor:
    """Rotate the trailing ``k x k`` axes of ``kernel`` by ``i * 360 / n`` degrees."""
    kernel = as_tensor(kernel)
    _check_square(kernel.shape)
    k = kernel.shape[-1]
    rot = rotation_matrix(i, n, k).astype(kernel.dtype)
    lead = kernel.shape[:-2]
    flat = kernel.data.reshape(*lead, k * k)
    out = (flat @ rot.T).reshape(kernel.shape)

    def backward(g):
        return ((g.reshape(*lead, k * k) @ rot).reshape(kernel.shape),)

    return _make(out, (kernel,), backward)


def _expand_lifting(weights: Tensor, orients) -> Tensor:
    # (Co, Ci, k, k) -> (len(orients)*Co, Ci, k, k); block r = weights rotated by orients[r]
    co, ci, k, _ = weights.shape
    n, idx = orients
    rots = _rotation_stack(n, k)[list(idx)].astype(weights.dtype)
    m = len(idx)
    flat = weights.data.reshape(co, ci, k * k)
    out = np.einsum("ocp,iqp->iocq", flat, rots).reshape(m * co, ci, k, k)

    def backward(g):
        gf = g.reshape(m, co, ci, k * k)
        return (np.einsum("iocq,iqp->ocp", gf, rots).reshape(weights.shape),)

    return _make(out, (weights,), backward)


def _expand_group(weights: Tensor, orients) -> Tensor:
    # (Co, Ci, n, k, k) -> (len(orients)*Co, n*Ci, k, k);
    # block (r, j) = weights[:, :, (j - i) mod n] rotated by i = orients[r]
    co, ci, n, k, _ = weights.shape
    idx = np.asarray(orients[1])
    m = len(idx)
    rots = _rotation_stack(n, k)[idx].astype(weights.dtype)
    shift = (np.arange(n)[None, :] - idx[:, None]) % n  # [r, j]
    flat = weights.data.reshape(co, ci, n, k * k)
    gathered = flat[:, :, shift]  # (Co, Ci, r, j, p)
    out = np.einsum("ocijp,iqp->iojcq", gathered, rots).reshape(m * co, n * ci, k, k)

    def backward(g):
        gf = g.reshape(m, co, n, ci, k * k)
        gg = np.einsum("iojcq,iqp->ocijp", gf, rots)
        gw = np.zeros_like(flat)
        for r in range(m):
            # scatter gathered slot j back to kernel slot (j - i) mod n
            gw[:, :, shift[r]] += gg[:, :, r]
        return (gw.reshape(weights.shape),)

    return _make(out, (weights,), backward)


def _add_channel_bias(x: Tensor, bias: Tensor, channel_axis: int) -> Tensor:
    shape = [1] * x.ndim
    shape[channel_axis] = bias.shape[0]
    b = bias.data.reshape(shape)
    out = x.data + b

    def backward(g):
        return g, channel_sum(g, channel_axis)

    return _make(out, (x, bias), backward)


def _quarter_turn_conv(x: Tensor, base_kernel: Tensor, n: int, co: int, orient_axis=None) -> Tensor:
    """Evaluate all ``n`` orientations from the first ``n/4`` expanded kernels.

    Orientation ``r + q*n/4`` is ``rot90^q(conv(rot90^-q(x), K_r))`` where the
    input's own orientation axis (if any) is also rolled by ``-q*n/4``.  Every
    quadrant reuses the same arithmetic on a permuted input, which makes the
    layer exactly equivariant to quarter turns in floating point.
    """
    m = n // 4
    blocks = []
    for q in range(4):
        xq = rot90(x, -q) if q else x
        if orient_axis is not None and q:
            xq = roll(xq, -q * m, axis=orient_axis)
        if orient_axis is not None:
            lead = xq.shape[:orient_axis]
            xq = reshape(xq, (*lead, -1, *xq.shape[-2:]))
        yq = conv2d_valid(xq, base_kernel)
        if q:
            yq = rot90(yq, q)
        blocks.append(yq)
    out = concat(blocks, axis=-3)
    lead = out.shape[:-3]
    return reshape(out, (*lead, n, co, *out.shape[-2:]))


def lifting_conv(x, weights, bias, n: int = 8) -> Tensor:
    """Correlate a planar image with ``n`` rotated copies of each kernel.

    ``x``: ``C_in x H x W`` or ``B x C_in x H x W``; ``weights``:
    ``C_out x C_in x k x k``; ``bias``: ``C_out``.  Returns
    ``(B x) n x C_out x H' x W'``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 4:
        raise ShapeError(f"lifting kernel must be C_out x C_in x k x k, got {weights.shape}")
    _check_square(weights.shape)
    if n % 4:
        return lifting_conv_reference(x, weights, bias, n)
    co = weights.shape[0]
    out = _quarter_turn_conv(x, _expand_lifting(weights, (n, range(n // 4))), n, co)
    return _add_channel_bias(out, bias, out.ndim - 3)


def lifting_conv_reference(x, weights, bias, n: int = 8) -> Tensor:
    """Direct evaluation with all ``n`` rotated kernels in one convolution."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    co = weights.shape[0]
    out = conv2d_valid(x, _expand_lifting(weights, (n, range(n))))
    lead = out.shape[:-3]
    out = reshape(out, (*lead, n, co, *out.shape[-2:]))
    return _add_channel_bias(out, bias, out.ndim - 3)


def group_conv(x, weights, bias) -> Tensor:
    """Roto-translation group correlation.

    ``x``: ``(B x) N x C_in x H x W``; ``weights``: ``C_out x C_in x N x k x k``;
    ``bias``: ``C_out``.  Output orientation ``i`` sums over input
    orientations ``j`` the correlation of ``x[j]`` with kernel slice
    ``(j - i) mod N`` rotated by ``i``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 5:
        raise ShapeError(f"group kernel must be C_out x C_in x N x k x k, got {weights.shape}")
    _check_square(weights.shape)
    co, ci, n = weights.shape[:3]
    if x.ndim not in (4, 5) or x.shape[-4] != n or x.shape[-3] != ci:
        raise ShapeError(
            f"group feature map {x.shape} does not match kernel {weights.shape} "
            f"(expected (B x) {n} x {ci} x H x W)")
    if n % 4:
        return group_conv_reference(x, weights, bias)
    kernel = _expand_group(weights, (n, range(n // 4)))
    out = _quarter_turn_conv(x, kernel, n, co, orient_axis=x.ndim - 4)
    return _add_channel_bias(out, bias, out.ndim - 3)


def group_conv_reference(x, weights, bias) -> Tensor:
    """Direct evaluation with all ``N`` rotated kernels in one convolution."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    co, ci, n = weights.shape[:3]
    lead = x.shape[:-4]
    flat = reshape(x, (*lead, n * ci, *x.shape[-2:]))
    out = conv2d_valid(flat, _expand_group(weights, (n, range(n))))
    out = reshape(out, (*lead, n, co, *out.shape[-2:]))
    return _add_channel_bias(out, bias, out.ndim - 3)


def orientation_max_project(x) -> Tensor:
    """Maximum over the orientation axis (``-4``); ties go to the lowest index."""
    x = as_tensor(x)
    if x.ndim < 4:
        raise ShapeError(f"expected (B x) N x C x H x W, got {x.shape}")
    ax = x.ndim - 4
    idx = np.expand_dims(x.data.argmax(axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(out, (x,), backward)


def rot90_group(fmap: np.ndarray, k: int = 1) -> np.ndarray:
    """Act with ``k`` quarter turns on a group feature map (numpy array).

    Rotates the two spatial axes and cyclically shifts the orientation
    axis (``-4``) by ``k * N / 4``.
    """
    n = fmap.shape[-4]
    if n % 4:
        raise ValueError(f"quarter turns need N divisible by 4, got N={n}")
    rotated = np.rot90(fmap, k, axes=(-2, -1))
    return np.roll(rotated, k * n // 4, axis=-4)
