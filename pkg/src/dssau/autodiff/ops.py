"""Differentiable kernels: matmul, softmax, top-k/gather, convolution,
pooling, resampling, normalization and activations.

Spatial tensors are channels-last, ``(B, H, W, C)``. Convolution weights
are ``(C_out, C_in / groups, kh, kw)``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..errors import DimensionError, GatherIndexError, ParameterError
from .tensor import Function, Tensor, as_tensor, unbroadcast

IndexTensor = np.ndarray  # non-negative integer array addressing one axis


# -- matmul ----------------------------------------------------------------
class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    return MatMul.apply(a, b)


# -- softmax ---------------------------------------------------------------
class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        self.y = z / z.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ParameterError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


# -- top-k / gather --------------------------------------------------------
def topk_indices(x: np.ndarray, k: int, axis: int = -1) -> IndexTensor:
    """Indices of the ``k`` largest entries along ``axis``, descending, ties to the lower index."""
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ParameterError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-x, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


def topk(x: Tensor, k: int, axis: int = -1) -> tuple:
    """Return ``(values, indices)``; values stay differentiable through gather."""
    x = as_tensor(x)
    idx = topk_indices(x.data, k, axis)
    return gather(x, idx, axis), idx


class Gather(Function):
    def forward(self, x, idx, axis):
        self.x_shape, self.axis = x.shape, axis
        self.idx = idx
        out = np.take_along_axis(x, idx, axis=axis)
        self.out_shape = out.shape
        return out

    def backward(self, g):
        # Flat target offset of every output element, then one deterministic scatter-add.
        shape, axis = self.x_shape, self.axis
        ndim = len(shape)
        strides = np.cumprod((shape[1:] + (1,))[::-1])[::-1]
        flat = np.zeros(self.out_shape, dtype=np.int64)
        for d in range(ndim):
            if d == axis:
                flat = flat + self.idx.astype(np.int64) * strides[d]
            elif shape[d] > 1:
                view = [1] * ndim
                view[d] = self.out_shape[d]
                flat = flat + np.arange(self.out_shape[d], dtype=np.int64).reshape(view) * strides[d]
        acc = np.bincount(flat.ravel(), weights=g.ravel().astype(np.float64), minlength=int(np.prod(shape)))
        return (acc.reshape(shape).astype(g.dtype),)


def gather(x: Tensor, idx: IndexTensor, axis: int) -> Tensor:
    """``out[..., j, ...] = x[..., idx[..., j, ...], ...]`` with numpy broadcasting off ``axis``.

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.ndim != x.ndim:
        raise DimensionError(f"gather: index rank {idx.ndim} != tensor rank {x.ndim}")
    axis = axis % x.ndim
    extent = x.shape[axis]
    if idx.size:
        lo, hi = idx.min(), idx.max()
        if lo < 0:
            raise GatherIndexError(f"gather: index {lo} is negative")
        if hi >= extent:
            raise GatherIndexError(f"gather: index {hi} out of range for axis {axis} of extent {extent}")
    for d in range(x.ndim):
        if d != axis and not (x.shape[d] == idx.shape[d] or 1 in (x.shape[d], idx.shape[d])):
            raise DimensionError(f"gather: shapes {x.shape} and {idx.shape} do not broadcast")
    return Gather.apply(x, idx=idx, axis=axis)


# -- convolution -----------------------------------------------------------
class Conv2d(Function):
    def forward(self, x, w, stride, padding, groups):
        B, H, W, cin = x.shape
        cout, cpg, kh, kw = w.shape
        p, s = padding, stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho = (H + 2 * p - kh) // s + 1
        wo = (W + 2 * p - kw) // s + 1
        self.xp, self.w, self.cfg = xp, w, (s, p, groups, ho, wo, x.shape)
        mode = "dense" if groups == 1 else ("depthwise" if groups == cin == cout else "grouped")
        self.mode = mode
        if mode == "dense":
            # im2col: one matmul over (kh, kw, cin) patches
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, ho, wo, kh * kw * cin)
            return cols @ w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
        out = np.zeros((B, ho, wo, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
                if mode == "dense":
                    out += xs @ w[:, :, i, j].T
                elif mode == "depthwise":
                    out += xs * w[:, 0, i, j]
                else:
                    xg = xs.reshape(B, ho, wo, groups, cpg)
                    wg = w[:, :, i, j].reshape(groups, cout // groups, cpg)
                    out += np.einsum("bhwgc,goc->bhwgo", xg, wg).reshape(B, ho, wo, cout)
        return out

    def backward(self, g):
        s, p, groups, ho, wo, x_shape = self.cfg
        xp, w = self.xp, self.w
        B = g.shape[0]
        cout, cpg, kh, kw = w.shape
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s), slice(None))
                xs = xp[sl]
                if self.mode == "dense":
                    gw[:, :, i, j] = g2.T @ xs.reshape(-1, xs.shape[-1])
                    gxp[sl] += g @ w[:, :, i, j]
                elif self.mode == "depthwise":
                    gw[:, 0, i, j] = (g * xs).sum(axis=(0, 1, 2))
                    gxp[sl] += g * w[:, 0, i, j]
                else:
                    xg = xs.reshape(B, ho, wo, groups, cpg)
                    gg = g.reshape(B, ho, wo, groups, cout // groups)
                    wg = w[:, :, i, j].reshape(groups, cout // groups, cpg)
                    gw[:, :, i, j] = np.einsum("bhwgo,bhwgc->goc", gg, xg).reshape(cout, cpg)
                    gxp[sl] += np.einsum("bhwgo,goc->bhwgc", gg, wg).reshape(xs.shape)
        H, W = x_shape[1], x_shape[2]
        gx = gxp[:, p : p + H, p : p + W, :] if p else gxp
        return gx, gw


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on channels-last input.

    Output extent is ``floor((in + 2*padding - k) / stride) + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    cin, cout, cpg = x.shape[-1], w.shape[0], w.shape[1]
    if groups < 1 or cin % groups or cout % groups or cin // groups != cpg:
        raise ParameterError(f"conv2d: {cin} input / {cout} output channels incompatible with groups={groups} and weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: invalid stride={stride} padding={padding}")
    kh, kw = w.shape[2:]
    if x.shape[1] + 2 * padding < kh or x.shape[2] + 2 * padding < kw:
        raise ParameterError(f"conv2d: input {x.shape[1:3]} smaller than kernel {(kh, kw)} after padding")
    out = Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)
    if bias is not None:
        out = out + bias
    return out


# -- pooling and resampling (separable linear maps) --------------------------
class SpatialLinear(Function):
    """``y[b] = Mh @ x[b] @ Mw.T`` applied over the two spatial axes."""

    def forward(self, x, mh, mw):
        self.mh, self.mw = mh.astype(x.dtype), mw.astype(x.dtype)
        return _apply_separable(x, self.mh, self.mw)

    def backward(self, g):
        return (_apply_separable(g, self.mh.T, self.mw.T),)


def _apply_separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    t = np.tensordot(mh, x, axes=([1], [1]))  # (Ho, B, W, C)
    t = np.tensordot(mw, t, axes=([1], [2]))  # (Wo, Ho, B, C)
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        start = (o * n_in) // n_out
        end = -((-(o + 1) * n_in) // n_out)
        m[o, start:end] = 1.0 / (end - start)
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling to an arbitrary extent (half-pixel-centre convention)."""
    x = as_tensor(x)
    _check_spatial(x, "resize_bilinear")
    return SpatialLinear.apply(x, mh=_bilinear_matrix(x.shape[1], out_h), mw=_bilinear_matrix(x.shape[2], out_w))


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by 2, 4 or 8.

    Uses half-pixel centres (``align_corners=False``): output pixel ``o``
    samples input coordinate ``(o + 0.5) / factor - 0.5``, clamped at edges.
    """
    if factor not in (2, 4, 8):
        raise ParameterError(f"upsample_bilinear: unsupported factor {factor}")
    x = as_tensor(x)
    _check_spatial(x, "upsample_bilinear")
    return resize_bilinear(x, x.shape[1] * factor, x.shape[2] * factor)


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average pooling to ``bins x bins`` with floor/ceil bin edges."""
    x = as_tensor(x)
    _check_spatial(x, "adaptive_avg_pool")
    if bins < 1 or bins > min(x.shape[1], x.shape[2]):
        raise ParameterError(f"adaptive_avg_pool: {bins} bins exceed input extent {x.shape[1:3]}")
    return SpatialLinear.apply(x, mh=_adaptive_pool_matrix(x.shape[1], bins), mw=_adaptive_pool_matrix(x.shape[2], bins))


def avg_pool_region(x: Tensor, S: int) -> Tensor:
    """Mean over each of the ``S x S`` non-overlapping regions; output ``(B, S, S, C)``."""
    x = as_tensor(x)
    _check_spatial(x, "avg_pool_region")
    B, H, W, C = x.shape
    if S < 1 or H % S or W % S:
        raise ParameterError(f"avg_pool_region: extent {(H, W)} not divisible into {S}x{S} regions")
    return x.reshape(B, S, H // S, S, W // S, C).mean(axis=(2, 4))


def _check_spatial(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected (B, H, W, C), got {x.shape}")


# -- normalization and activations -----------------------------------------
LN_EPS = 1e-5


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        c = xhat.shape[-1]
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * self.gamma
        gx = inv / c * (c * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last (channel) axis, then apply the affine pair."""
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    # tanh approximation
    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(as_tensor(x))


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(as_tensor(x))
