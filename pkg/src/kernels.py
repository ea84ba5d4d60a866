"""Differentiable kernels used by the tracking model.

Each kernel computes its forward pass directly on numpy arrays and registers
a hand-written backward closure, so the graph holds one node per kernel call
rather than one per elementary operation.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .errors import ArgumentError, ConfigError, DimensionError
from .tensor import as_tensor, make_result, matmul, reshape, transpose

LN_EPS = 1e-6


def _einsum(spec, *operands):
    return np.einsum(spec, *operands, optimize=True)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2D cross-correlation over an ``[N, C, H, W]`` batch.

    ``weight`` is ``[O, C/groups, kh, kw]``. Output extents follow
    ``(H + 2*padding - kh) // stride + 1``.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [N,C,H,W], got shape {x.shape}", axis=0)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [O,C/g,kh,kw], got shape {weight.shape}", axis=0)
    if padding < 0:
        raise ArgumentError(f"conv2d padding must be >= 0, got {padding}")
    if stride < 1:
        raise ArgumentError(f"conv2d stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups:
        raise DimensionError(f"input channels {c} not divisible by groups={groups}", axis=1)
    if cg * groups != c:
        raise DimensionError(
            f"weight expects {cg * groups} input channels, input has {c}", axis=1
        )
    if o % groups:
        raise DimensionError(f"output channels {o} not divisible by groups={groups}", axis=0)
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} outputs", axis=0)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0:
        raise DimensionError(f"kernel height {kh} exceeds padded input height", axis=2)
    if wo <= 0:
        raise DimensionError(f"kernel width {kw} exceeds padded input width", axis=3)

    og = o // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    rows = lambda i: slice(i, i + stride * (ho - 1) + 1, stride)
    cols = lambda j: slice(j, j + stride * (wo - 1) + 1, stride)

    out = np.zeros((n, groups, og, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _einsum("ngchw,goc->ngohw", xg[:, :, :, rows(i), cols(j)], wg[:, :, :, i, j])
    out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def _backward(g):
        gg = g.reshape(n, groups, og, ho, wo)
        gx = np.zeros_like(xg)
        gw = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, :, rows(i), cols(j)] += _einsum("ngohw,goc->ngchw", gg, wg[:, :, :, i, j])
                gw[:, :, :, i, j] = _einsum("ngohw,ngchw->goc", gg, xg[:, :, :, rows(i), cols(j)])
        gx = gx.reshape(xp.shape)[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, _backward)


def _pool_counts(extent, k):
    size = math.ceil(extent / k)
    counts = np.full(size, k, dtype=np.int64)
    counts[-1] = extent - k * (size - 1)
    return counts


def avg_pool2d(x, k):
    """Average pool with window and stride ``k`` over the last two axes.

    The output has ``ceil(extent / k)`` cells per axis; trailing partial
    windows are averaged over the pixels they actually contain.
    """
    if k <= 0:
        raise ArgumentError(f"avg_pool2d needs k >= 1, got {k}")
    if x.ndim < 2:
        raise DimensionError("avg_pool2d needs at least two spatial axes", axis=0)
    if k == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    *lead, h, w = x.shape
    ch, cw = _pool_counts(h, k), _pool_counts(w, k)
    oh, ow = len(ch), len(cw)
    padded = np.pad(x.data, [(0, 0)] * len(lead) + [(0, oh * k - h), (0, ow * k - w)])
    sums = padded.reshape(*lead, oh, k, ow, k).sum(axis=(-3, -1))
    area = np.outer(ch, cw).astype(x.dtype)
    out = sums / area

    def _backward(g):
        per_pixel = np.repeat(np.repeat(g / area, k, axis=-2), k, axis=-1)
        return (np.ascontiguousarray(per_pixel[..., :h, :w]),)

    return make_result(out, (x,), _backward)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_sample_batched(maps, coords):
    """Sample ``maps[b]`` at ``coords[b]``.

    ``maps`` is ``[B, C, H, W]`` and ``coords`` is ``[B, n, 2]`` holding
    ``(x, y)`` pixel positions; integer coordinates land exactly on pixels
    and neighbors outside the map contribute zero. Returns ``[B, n, C]``.
    """
    coords = as_tensor(coords, maps)
    if maps.ndim != 4:
        raise DimensionError(f"maps must be [B,C,H,W], got shape {maps.shape}", axis=0)
    if coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != maps.shape[0]:
        raise DimensionError(
            f"coords shape {coords.shape} does not pair with maps {maps.shape}", axis=0
        )
    if np.isnan(coords.data).any():
        raise ArgumentError("bilinear_sample received NaN coordinates")
    b, c, h, w = maps.shape
    n = coords.shape[1]
    flat = maps.data.reshape(b, c, h * w)
    cx, cy = coords.data[..., 0], coords.data[..., 1]
    x0, y0 = np.floor(cx), np.floor(cy)
    fx, fy = cx - x0, cy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)

    corners = []
    out = np.zeros((b, c, n), dtype=maps.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            lin = np.where(inside, yi * w + xi, 0)
            vals = np.take_along_axis(flat, np.broadcast_to(lin[:, None, :], (b, c, n)), axis=2)
            vals = vals * inside[:, None, :]
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            out += vals * (wx * wy)[:, None, :]
            corners.append((dx, dy, lin, inside, vals, wx, wy))

    def _backward(g):
        gt = np.transpose(g, (0, 2, 1))
        gmap = np.zeros(b * c * h * w, dtype=maps.dtype)
        gcoords = np.zeros(coords.shape, dtype=maps.dtype)
        base = (np.arange(b)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        for dx, dy, lin, inside, vals, wx, wy in corners:
            weight = (wx * wy * inside)[:, None, :] * gt
            gmap += np.bincount(
                (base + lin[:, None, :]).ravel(), weights=weight.ravel(), minlength=gmap.size
            )
            dot = (gt * vals).sum(axis=1)
            gcoords[..., 0] += dot * wy * (1.0 if dx else -1.0)
            gcoords[..., 1] += dot * wx * (1.0 if dy else -1.0)
        return gmap.reshape(maps.shape), gcoords

    return make_result(np.transpose(out, (0, 2, 1)), (maps, coords), _backward)


def bilinear_sample(feature_map, coords):
    """Sample a ``[C, H, W]`` map at ``[n, 2]`` (x, y) coordinates -> ``[n, C]``."""
    coords = as_tensor(coords, feature_map)
    if feature_map.ndim != 3:
        raise DimensionError(f"map must be [C,H,W], got shape {feature_map.shape}", axis=0)
    if coords.ndim != 2 or coords.shape[-1] != 2:
        raise DimensionError(f"coords must be [n,2], got shape {coords.shape}", axis=1)
    maps = reshape(feature_map, (1,) + feature_map.shape)
    pts = reshape(coords, (1,) + coords.shape)
    out = bilinear_sample_batched(maps, pts)
    return reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def _channel_shape(ndim, axis, extent):
    shape = [1] * ndim
    shape[axis] = extent
    return shape


def layer_norm(x, weight, bias, axis=-1, eps=LN_EPS):
    """Normalize over ``axis`` with a learnable per-channel affine."""
    axis = axis % x.ndim
    extent = x.shape[axis]
    if extent == 0:
        raise ArgumentError("layer_norm over an empty axis")
    if weight.shape != (extent,) or bias.shape != (extent,):
        raise DimensionError(
            f"layer_norm affine shape {weight.shape} does not match axis extent {extent}",
            axis=axis,
        )
    bshape = _channel_shape(x.ndim, axis, extent)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std
    gamma = weight.data.reshape(bshape)
    out = xhat * gamma + bias.data.reshape(bshape)
    others = tuple(a for a in range(x.ndim) if a != axis)

    def _backward(g):
        gxhat = g * gamma
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_result(out, (x, weight, bias), _backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return make_result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x):
    out = expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise ArgumentError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), _backward)


def linear(x, weight, bias=None):
    """Affine map over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}", axis=-1
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, x.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, _backward)


def layer_scale(x, gamma, axis=-1):
    """Multiply ``x`` by a per-channel scale along ``axis``."""
    axis = axis % x.ndim
    if gamma.shape != (x.shape[axis],):
        raise DimensionError(
            f"layer_scale gamma {gamma.shape} does not match axis extent {x.shape[axis]}",
            axis=axis,
        )
    bshape = _channel_shape(x.ndim, axis, x.shape[axis])
    scale = gamma.data.reshape(bshape)
    others = tuple(a for a in range(x.ndim) if a != axis)

    def _backward(g):
        return g * scale, (g * x.data).sum(axis=others)

    return make_result(x.data * scale, (x, gamma), _backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads, return_weights=False):
    """Scaled dot-product self-attention over the token axis of ``[..., L, D]``.

    Projections are ``[D, D]`` weights (``linear`` layout). With
    ``return_weights`` the per-head attention maps ``[..., heads, L, L]`` are
    returned alongside the output.
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"feature dim {d} not divisible by heads={heads}", field="heads")
    lead, tokens = x.shape[:-2], x.shape[-2]
    dh = d // heads

    def split(t):
        t = reshape(t, lead + (tokens, heads, dh))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, order)

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    kt = transpose(k, tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1))
    weights = softmax(matmul(q, kt) * (1.0 / math.sqrt(dh)), axis=-1)
    mixed = matmul(weights, v)
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    merged = reshape(transpose(mixed, order), lead + (tokens, d))
    out = linear(merged, wo, bo)
    return (out, weights) if return_weights else out
