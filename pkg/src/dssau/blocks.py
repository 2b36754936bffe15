"""Building blocks: overlapped patch embedding, patch merging, the attention
block and the pyramid pooling module.

Parameter counts (channels ``C``, MLP ratio ``r``):

* ``DssaBlock``: position conv ``10C`` + two norms ``4C`` + projections
  ``3C^2`` + LCE ``26C`` + MLP ``2rC^2 + (r+1)C``.
* ``PatchEmbed`` (3 -> C): ``27C/2 + C/2`` + ``C`` + ``9C^2/2 + C`` + ``2C``.
* ``PatchMerge`` (C -> 2C): ``18C^2 + 2C`` + ``4C``.
"""

from __future__ import annotations

import numpy as np

from .attention import DSSA, DssaConfig
from .autodiff import Tensor, adaptive_avg_pool, concat, gelu, resize_bilinear
from .errors import ParameterError
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList


class PatchEmbed(Module):
    """Two overlapping stride-2 3x3 convs: ``(B, H, W, c_in) -> (B, H/4, W/4, C)``."""

    def __init__(self, c_in: int, dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, dim // 2, 3, rng, stride=2, padding=1)
        self.norm1 = LayerNorm(dim // 2)
        self.conv2 = Conv2d(dim // 2, dim, 3, rng, stride=2, padding=1)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 32 or x.shape[2] % 32:
            raise ParameterError(f"patch_embed: input extent {x.shape[1:3]} not divisible by 32")
        x = gelu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(x))


class PatchMerge(Module):
    """Strided 3x3 conv halving the extent and doubling the channels, then LayerNorm."""

    def __init__(self, dim: int, rng: np.random.Generator, out_dim: int | None = None):
        out_dim = out_dim or 2 * dim
        self.conv = Conv2d(dim, out_dim, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(out_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ParameterError(f"patch_merge: odd extent {x.shape[1:3]}")
        return self.norm(self.conv(x))


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, ratio * dim, rng)
        self.fc2 = Linear(ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class DssaBlock(Module):
    """``u = DWConv(z) + z``; ``z' = DSSA(LN(u)) + u``; ``out = MLP(LN(z')) + z'``."""

    def __init__(self, cfg: DssaConfig, rng: np.random.Generator, mlp_ratio: int = 3):
        dim = cfg.dim
        self.pos = Conv2d(dim, dim, 3, rng, groups=dim)
        self.norm1 = LayerNorm(dim)
        self.attn = DSSA(cfg, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)

    def forward(self, z: Tensor) -> Tensor:
        u = self.pos(z) + z
        z = self.attn(self.norm1(u)) + u
        return self.mlp(self.norm2(z)) + z


def dssa_block(z: Tensor, params: DssaBlock, cfg: DssaConfig) -> Tensor:
    if params.attn.cfg != cfg:
        raise ParameterError("dssa_block: parameters were built for a different configuration")
    return params(z)


def make_stage(cfg: DssaConfig, depth: int, rng: np.random.Generator, mlp_ratio: int) -> ModuleList:
    return ModuleList(DssaBlock(cfg, rng, mlp_ratio) for _ in range(depth))


class PPM(Module):
    """Pyramid pooling: per-bin adaptive pooling + 1x1 conv + GELU, bilinear
    upsampling back to the input extent, concatenation with the input and
    a 3x3 fusion conv to ``out_dim`` channels."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bins=(1, 2, 3, 6)):
        self.bins = tuple(bins)
        self.branches = ModuleList(Conv2d(in_dim, out_dim, 1, rng) for _ in self.bins)
        self.fuse = Conv2d(in_dim + len(self.bins) * out_dim, out_dim, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[1:3]
        if max(self.bins) > min(H, W):
            raise ParameterError(f"ppm: input extent {(H, W)} smaller than largest bin {max(self.bins)}")
        feats = [x]
        for b, conv in zip(self.bins, self.branches):
            pooled = gelu(conv(adaptive_avg_pool(x, b)))
            feats.append(resize_bilinear(pooled, H, W))
        return self.fuse(concat(feats, axis=-1))


def dssa_block_params(dim: int, mlp_ratio: int) -> int:
    return 3 * dim * dim + 2 * mlp_ratio * dim * dim + (10 + 4 + 26 + mlp_ratio + 1) * dim
