"""Differentiable operators used by TransVNet.

Spatial ops take ``[N, C, D, H, W]`` tensors. Convolutions run channels-last
internally as one matmul per kernel offset.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, _norm_axes, concat, matmul, reshape, transpose

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


def _triple(v) -> tuple:
    return tuple(int(x) for x in v) if isinstance(v, (tuple, list)) else (int(v),) * 3


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: ((g * (cdf + x.data * pdf)).astype(x.dtype),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: parameters {gamma.shape}/{beta.shape} for feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gamma, beta), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance). In eval mode the running buffers
    are used and nothing is mutated.
    """
    if x.ndim < 2 or x.size == 0 or x.shape[0] == 0:
        raise ValueError(f"batch_norm needs a non-empty batch, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: parameters {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if running_mean is not None:
            n = x.size // c
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
        xc = x.data - mu.reshape(bshape)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx_hat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                                        - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gx_hat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation with zero padding.

    ``x`` is ``[N, C, D, H, W]`` and ``kernel`` is ``[K, C, kd, kh, kw]``.
    Output extents are ``(n + 2p - k) // s + 1``.
    """
    if x.ndim != 5 or kernel.ndim != 5 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv3d: bias {bias.shape} for {kernel.shape[0]} output channels")
    s, p = _triple(stride), _triple(padding)
    n, c = x.shape[:2]
    k_out = kernel.shape[0]
    ks = kernel.shape[2:]
    out_sp = tuple(_conv_out(x.shape[2 + i], ks[i], s[i], p[i]) for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: kernel {kernel.shape} too large for input {x.shape} with padding {p}")
    xt = x.data.transpose(0, 2, 3, 4, 1)
    if any(p):
        xp = np.pad(xt, ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]), (0, 0)))
    else:
        xp = np.ascontiguousarray(xt)
    wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # kd, kh, kw, C, K
    offsets = [(a, b, cc) for a in range(ks[0]) for b in range(ks[1]) for cc in range(ks[2])]

    def window(arr, a, b, cc):
        return arr[:, a:a + s[0] * (out_sp[0] - 1) + 1:s[0],
                   b:b + s[1] * (out_sp[1] - 1) + 1:s[1],
                   cc:cc + s[2] * (out_sp[2] - 1) + 1:s[2], :]

    out = np.zeros((n,) + out_sp + (k_out,), dtype=x.dtype)
    for a, b, cc in offsets:
        out += window(xp, a, b, cc) @ wt[a, b, cc]
    if bias is not None:
        out += bias.data
    result = out.transpose(0, 4, 1, 2, 3)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        g2 = gt.reshape(-1, k_out)
        gw = np.empty_like(wt)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for a, b, cc in offsets:
            win = np.ascontiguousarray(window(xp, a, b, cc)).reshape(-1, c)
            gw[a, b, cc] = win.T @ g2
            if gxp is not None:
                window(gxp, a, b, cc)[...] += gt @ wt[a, b, cc].T
        gx = None
        if gxp is not None:
            gx = gxp[:, p[0]:p[0] + x.shape[2], p[1]:p[1] + x.shape[3], p[2]:p[2] + x.shape[4], :]
            gx = gx.transpose(0, 4, 1, 2, 3)
        gk = gw.transpose(4, 3, 0, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(result, parents, backward)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights (align-corners=False), shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def _apply_along(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(mat, arr, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def resize_linear(x: Tensor, size) -> Tensor:
    """Separable linear resampling of the spatial axes (2 onward) to ``size``."""
    size = tuple(int(v) for v in size)
    spatial = x.ndim - 2
    if len(size) != spatial:
        raise ShapeError(f"resize to {size} needs {len(size)} spatial axes, input has {spatial}")
    mats = [interpolation_matrix(x.shape[2 + i], size[i]).astype(x.dtype) for i in range(spatial)]
    out = x.data
    for i, m in enumerate(mats):
        if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
            out = _apply_along(out, m, 2 + i)

    def backward(g):
        for i, m in reversed(list(enumerate(mats))):
            g = _apply_along(g, m.T, 2 + i)
        return (g,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def trilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    if x.ndim != 5:
        raise ShapeError(f"trilinear_upsample expects [N, C, D, H, W], got {x.shape}")
    return resize_linear(x, tuple(int(factor) * n for n in x.shape[2:]))


def max_pool3d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    f = int(factor)
    n, c, d, h, w = x.shape
    if d % f or h % f or w % f:
        raise ShapeError(f"max_pool3d: spatial dims {x.shape[2:]} not divisible by {f}")
    blocks = x.data.reshape(n, c, d // f, f, h // f, f, w // f, f).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    flat = blocks.reshape(n, c, d // f, h // f, w // f, f ** 3)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, c, d // f, h // f, w // f, f, f, f).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)


def multi_head_self_attention(z: Tensor, params: dict, n_heads: int, return_weights: bool = False):
    """Scaled dot-product self-attention over the token axis.

    ``z`` is ``[N, D]`` or ``[B, N, D]``. ``params`` holds ``wq, wk, wv, wo``
    of shape ``(D, D)`` and optional biases ``bq, bk, bv, bo``.
    """
    d = z.shape[-1]
    if d % n_heads:
        raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
    squeeze = z.ndim == 2
    if squeeze:
        z = reshape(z, (1,) + z.shape)
    b, n, _ = z.shape
    dh = d // n_heads

    def heads(t):
        return transpose(reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(z, params["wq"], params.get("bq")))
    k = heads(linear(z, params["wk"], params.get("bk")))
    v = heads(linear(z, params["wv"], params.get("bv")))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    out = linear(ctx, params["wo"], params.get("bo"))
    if squeeze:
        out = reshape(out, (n, d))
    return (out, weights) if return_weights else out


__all__ = [
    "batch_norm", "concat", "conv3d", "gelu", "interpolation_matrix", "layer_norm", "linear", "log_softmax",
    "max_pool3d", "multi_head_self_attention", "relu", "resize_linear", "softmax", "trilinear_upsample",
]
