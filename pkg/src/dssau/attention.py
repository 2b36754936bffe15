"""Dual sparse selection attention.

Tokens of a ``(B, H, W, C)`` map are grouped into ``S x S`` regions. Each
region first routes to its ``k1`` most relevant regions (scores between
region-mean queries and keys); each pixel query then keeps only its ``k2``
best-scoring keys among the gathered tokens, and the softmax-weighted sum
of their values is added to a 5x5 depth-wise convolution of ``V``.

Region routing is shared by all heads; pixel selection is per head.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .autodiff import IndexTensor, Tensor, conv2d, gather, matmul, softmax, topk_indices
from .errors import ConfigError, DimensionError, ParameterError
from .nn import Linear, Module, Parameter


@dataclass(frozen=True)
class DssaConfig:
    """Sparsity layout of one attention stage.

    ``lam`` is the pixel-level keep fraction; ``k2`` follows from it as
    ``round_half_up(lam * k1 * HW / S^2)`` and must be at least 1.
    """

    regions: int
    k1: int
    lam: float
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.regions < 1:
            raise ConfigError(f"regions must be >= 1, got {self.regions}")
        if not 1 <= self.k1 <= self.regions ** 2:
            raise ConfigError(f"k1={self.k1} outside [1, {self.regions ** 2}]")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda={self.lam} outside (0, 1]")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError(f"invalid head layout {self.heads}x{self.head_dim}")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    def tokens_per_region(self, h: int, w: int) -> int:
        return (h * w) // (self.regions ** 2)

    def k2(self, h: int, w: int) -> int:
        self.check_extent(h, w)
        return retained_count(self.lam, self.k1 * self.tokens_per_region(h, w))

    def check_extent(self, h: int, w: int) -> None:
        if h % self.regions or w % self.regions:
            raise ParameterError(f"extent {h}x{w} not divisible into {self.regions}x{self.regions} regions")


def retained_count(lam: float, gathered: int) -> int:
    """``k2 = round_half_up(lam * gathered)``, rejected when it rounds below 1."""
    k2 = math.floor(Fraction(lam).limit_denominator(1 << 20) * gathered + Fraction(1, 2))
    if k2 < 1:
        raise ConfigError(f"k2 rounds to {k2} for lambda={lam} over {gathered} gathered tokens")
    return min(k2, gathered)


@dataclass
class AttentionTrace:
    """Diagnostics of one forward call (first-stage and second-stage routing)."""

    region_scores: np.ndarray
    region_indices: IndexTensor
    pixel_indices: IndexTensor
    k2: int
    score_evaluations: int  # pixel-level query-key scores per image and head
    retained_pairs: int  # pixel-level pairs kept after top-k2, per image and head
    kept_fraction: float = field(init=False)
    extent: tuple = (0, 0)

    def __post_init__(self):
        h, w = self.extent
        self.kept_fraction = self.retained_pairs / float((h * w) ** 2)


# -- routing record/replay ------------------------------------------------------
class RoutingRecorder:
    """Records the discrete top-k choices of successive attention calls and
    replays them, so finite differences see a fixed selection pattern."""

    def __init__(self):
        self.entries: list = []
        self.replaying = False
        self.cursor = 0

    def rewind(self) -> None:
        self.cursor = 0

    def choose(self, scores: np.ndarray, k: int) -> IndexTensor:
        if self.replaying:
            idx = self.entries[self.cursor]
            self.cursor += 1
            return idx
        idx = topk_indices(scores, k, axis=-1)
        self.entries.append(idx)
        return idx


_RECORDER: contextvars.ContextVar = contextvars.ContextVar("routing_recorder", default=None)


@contextlib.contextmanager
def frozen_routing(recorder: Optional[RoutingRecorder] = None, replay: bool = False):
    recorder = recorder or RoutingRecorder()
    recorder.replaying = replay
    recorder.rewind()
    token = _RECORDER.set(recorder)
    try:
        yield recorder
    finally:
        _RECORDER.reset(token)


def _select(scores: np.ndarray, k: int) -> IndexTensor:
    rec = _RECORDER.get()
    if rec is None:
        return topk_indices(scores, k, axis=-1)
    return rec.choose(scores, k)


# -- layout helpers ------------------------------------------------------------
def to_regions(x: Tensor, S: int) -> Tensor:
    """``(B, H, W, C) -> (B, S^2, HW/S^2, C)``; regions and in-region tokens row-major."""
    B, H, W, C = x.shape
    h, w = H // S, W // S
    return x.reshape(B, S, h, S, w, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, S * S, h * w, C)


def from_regions(x: Tensor, S: int, H: int, W: int) -> Tensor:
    B, _, _, C = x.shape
    h, w = H // S, W // S
    return x.reshape(B, S, S, h, w, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, R, n, C) -> (B, heads, R, n, d)
    B, R, n, C = x.shape
    return x.reshape(B, R, n, heads, C // heads).transpose(0, 3, 1, 2, 4)


def _merge_heads(x: Tensor) -> Tensor:
    B, heads, R, n, d = x.shape
    return x.transpose(0, 2, 3, 1, 4).reshape(B, R, n, heads * d)


# -- the mechanism, step by step ------------------------------------------------
def project_qkv(xr: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> tuple:
    """Bias-free linear projections of region-arranged tokens."""
    c = xr.shape[-1]
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if w.shape != (c, c):
            raise DimensionError(f"project_qkv: {name} has shape {w.shape}, expected {(c, c)}")
    return matmul(xr, wq), matmul(xr, wk), matmul(xr, wv)


def region_route(q: Tensor, k: Tensor, cfg: DssaConfig) -> tuple:
    """Return ``(Ir, Ar)``: the ``k1`` best regions per region and the region score matrix.

    Routing is a hard, non-differentiable choice, so scores are computed on raw arrays.
    """
    qr = q.data.mean(axis=-2)
    kr = k.data.mean(axis=-2)
    ar = qr @ np.swapaxes(kr, -1, -2)
    return _select(ar, cfg.k1), ar


def gather_regions(k: Tensor, v: Tensor, ir: IndexTensor) -> tuple:
    """Concatenate, per query region, the tokens of its routed regions in ``ir`` order."""
    B, R, n, C = k.shape
    k1 = ir.shape[-1]
    idx = ir.reshape(B, R, k1, 1)

    def _gather(t: Tensor) -> Tensor:
        flat = t.reshape(B, 1, R, n * C)
        return gather(flat, idx, axis=2).reshape(B, R, k1 * n, C)

    return _gather(k), _gather(v)


def pixel_select(q: Tensor, kg: Tensor, cfg: DssaConfig) -> tuple:
    """Per-head pixel-level scores, keep the top ``k2`` per query.

    ``q``/``kg`` are head-split, ``(B, heads, S^2, n, d)`` and
    ``(B, heads, S^2, k1*n, d)``. Logits are scaled by ``1/sqrt(d)``.
    Returns ``(AP, IP)``: retained scores (descending) and their indices.
    """
    k2 = retained_count(cfg.lam, kg.shape[-2])
    scale = 1.0 / math.sqrt(q.shape[-1])
    ap = matmul(q, kg.swapaxes(-1, -2)) * scale  # (B, h, R, n, k1*n)
    ip = _select(ap.data, k2)
    return gather(ap, ip, axis=-1), ip


def attend(ap: Tensor, ip: IndexTensor, vg: Tensor) -> Tensor:
    """Softmax over each query's retained scores, weighted sum of the selected values."""
    weights = softmax(ap, axis=-1)  # (B, h, R, n, k2)
    B, heads, R, n, k2 = weights.shape
    vgg = gather(vg.reshape(B, heads, R, 1, vg.shape[-2], vg.shape[-1]), ip[..., None], axis=4)
    out = matmul(weights.reshape(B, heads, R, n, 1, k2), vgg)  # (B, h, R, n, 1, d)
    return out.reshape(B, heads, R, n, vg.shape[-1])


def dssa_forward(x: Tensor, params: "DSSA", cfg: DssaConfig) -> tuple:
    """Full attention on ``(B, H, W, C)``; returns ``(O, trace)``."""
    if x.ndim != 4:
        raise DimensionError(f"dssa_forward: expected (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    if C != cfg.dim:
        raise DimensionError(f"dssa_forward: {C} channels but head layout gives {cfg.dim}")
    S = cfg.regions
    cfg.check_extent(H, W)
    cfg.k2(H, W)

    xr = to_regions(x, S)
    q, k, v = project_qkv(xr, params.wq, params.wk, params.wv)
    ir, ar = region_route(q, k, cfg)
    kg, vg = gather_regions(k, v, ir)

    qh = _split_heads(q, cfg.heads)
    kgh = _split_heads(kg, cfg.heads)
    vgh = _split_heads(vg, cfg.heads)
    ap, ip = pixel_select(qh, kgh, cfg)
    out = from_regions(_merge_heads(attend(ap, ip, vgh)), S, H, W)

    v_spatial = from_regions(v, S, H, W)
    lce = conv2d(v_spatial, params.lce_weight, params.lce_bias, padding=2, groups=C)

    trace = AttentionTrace(
        region_scores=ar,
        region_indices=ir,
        pixel_indices=ip,
        k2=ip.shape[-1],
        score_evaluations=ap_count(qh.shape, kgh.shape),
        retained_pairs=int(np.prod(ip.shape[2:])),
        extent=(H, W),
    )
    return out + lce, trace


def ap_count(q_shape: tuple, kg_shape: tuple) -> int:
    # number of (query, key) dot products per image and head in the pixel stage
    return int(np.prod(q_shape[2:4])) * kg_shape[-2]


class DSSA(Module):
    """Parameters of one attention layer: three bias-free projections and the LCE conv."""

    def __init__(self, cfg: DssaConfig, rng: np.random.Generator):
        c = cfg.dim
        self.cfg = cfg
        self.wq = Linear(c, c, rng, bias=False).weight
        self.wk = Linear(c, c, rng, bias=False).weight
        self.wv = Linear(c, c, rng, bias=False).weight
        bound = 1.0 / 5.0
        self.lce_weight = Parameter(rng.uniform(-bound, bound, size=(c, 1, 5, 5)))
        self.lce_bias = Parameter(rng.uniform(-bound, bound, size=c))
        self.last_trace: Optional[AttentionTrace] = None

    def forward(self, x: Tensor) -> Tensor:
        out, self.last_trace = dssa_forward(x, self, self.cfg)
        return out
