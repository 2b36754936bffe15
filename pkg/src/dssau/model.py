"""The U-shaped segmentation network: attention encoder, pyramid pooling
bottleneck, attention decoder with 1x1-conv skips and a multiscale fusion head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attention import DssaConfig
from .autodiff import Tensor, concat, upsample_bilinear
from .blocks import PPM, PatchEmbed, PatchMerge, make_stage
from .errors import ConfigError, ParameterError
from .nn import Conv2d, Module, ModuleList

SKIP_SCALES = (4, 8, 16)  # downsampling factor of each skip resolution


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 96  # C; encoder widths are C, 2C, 4C, 8C
    depths: tuple = (2, 2, 8, 2)
    decoder_width: int = 64
    num_classes: int = 3
    in_channels: int = 3
    regions: int = 8
    k1_schedule: tuple = (1, 4, 16, 64)
    lam: float = 1 / 8
    head_dim: int = 32
    mlp_ratio: int = 3
    ppm_bins: tuple = (1, 2, 3, 6)
    skips: tuple = SKIP_SCALES
    mff: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigError(f"depths must be four positive ints, got {self.depths}")
        if len(self.k1_schedule) != 4:
            raise ConfigError(f"k1_schedule must have four entries, got {self.k1_schedule}")
        bad = set(self.skips) - set(SKIP_SCALES)
        if bad:
            raise ConfigError(f"unknown skip resolutions {sorted(bad)}; choose from {SKIP_SCALES}")
        for w in (*self.widths, self.decoder_width):
            if w % self.head_dim:
                raise ConfigError(f"width {w} not divisible by head_dim {self.head_dim}")
        if self.channels % 2:
            raise ConfigError("channels must be even")
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "k1_schedule", tuple(self.k1_schedule))
        object.__setattr__(self, "skips", tuple(sorted(set(self.skips))))
        object.__setattr__(self, "ppm_bins", tuple(self.ppm_bins))

    @property
    def widths(self) -> tuple:
        c = self.channels
        return (c, 2 * c, 4 * c, 8 * c)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def stage_attention(cfg: ModelConfig, dim: int, extent: int, k1: int) -> DssaConfig:
    """Attention layout for a stage of spatial side ``extent``.

    The region grid is ``cfg.regions`` per side unless the map is smaller,
    in which case each token is its own region; ``k1`` is capped accordingly.
    """
    s = min(cfg.regions, extent)
    return DssaConfig(regions=s, k1=min(k1, s * s), lam=cfg.lam, heads=dim // cfg.head_dim, head_dim=cfg.head_dim)


@dataclass
class StageOutputs:
    encoder: list = field(default_factory=list)  # X1..X4
    decoder: list = field(default_factory=list)  # X5..X8

    @property
    def all(self) -> list:
        return self.encoder + self.decoder


class DSSAUNet(Module):
    def __init__(self, cfg: ModelConfig, image_size: int = 256, rng: Optional[np.random.Generator] = None):
        if image_size % 32:
            raise ParameterError(f"image_size {image_size} not divisible by 32")
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.image_size = image_size
        widths, cd = cfg.widths, cfg.decoder_width
        sides = [image_size // f for f in (4, 8, 16, 32)]

        self.embed = PatchEmbed(cfg.in_channels, widths[0], rng)
        self.merges = ModuleList(PatchMerge(widths[i], rng, widths[i + 1]) for i in range(3))
        self.encoder = ModuleList(
            make_stage(stage_attention(cfg, widths[i], sides[i], cfg.k1_schedule[i]), cfg.depths[i], rng, cfg.mlp_ratio)
            for i in range(4)
        )

        self.ppm = PPM(widths[3], cd, rng, cfg.ppm_bins)
        # decoder stage j (0..3 for X5..X8) runs at sides[3 - j]; k1 follows the
        # encoder stage of the same resolution
        self.decoder = ModuleList(
            make_stage(stage_attention(cfg, cd, sides[3 - j], cfg.k1_schedule[3 - j]), cfg.depths[j], rng, cfg.mlp_ratio)
            for j in range(4)
        )
        self.skip_convs = ModuleList(
            Conv2d(widths[2 - j], cd, 1, rng) if SKIP_SCALES[2 - j] in cfg.skips else None for j in range(3)
        )
        self.up_proj = Conv2d(cd, cd, 1, rng)  # 1x1 conv on the first upsampled decoder map

        self.fuse = Conv2d(4 * cd if cfg.mff else cd, cd, 1, rng)
        self.classify = Conv2d(cd, cfg.num_classes, 3, rng)

    # -- pieces ----------------------------------------------------------------
    def encode(self, x: Tensor) -> StageOutputs:
        if x.ndim != 4 or x.shape[-1] != self.cfg.in_channels:
            raise ParameterError(f"encode: expected (B, H, W, {self.cfg.in_channels}), got {x.shape}")
        if x.shape[1] != self.image_size or x.shape[2] != self.image_size:
            raise ParameterError(f"encode: network built for {self.image_size}px, got {x.shape[1:3]}")
        feats = []
        h = self.embed(x)
        for i, stage in enumerate(self.encoder):
            if i:
                h = self.merges[i - 1](h)
            for blk in stage:
                h = blk(h)
            feats.append(h)
        return StageOutputs(encoder=feats)

    def decode(self, enc: StageOutputs) -> StageOutputs:
        x1, x2, x3, x4 = enc.encoder
        skips_src = (x3, x2, x1)
        h = self.ppm(x4)
        for blk in self.decoder[0]:
            h = blk(h)
        dec = [h]
        for j in range(3):
            up = upsample_bilinear(h, 2)
            if j == 0:
                up = self.up_proj(up)
            conv = self.skip_convs[j]
            h = up if conv is None else conv(skips_src[j]) + up
            for blk in self.decoder[j + 1]:
                h = blk(h)
            dec.append(h)
        return StageOutputs(encoder=enc.encoder, decoder=dec)

    def mff_head(self, out: StageOutputs) -> Tensor:
        x5, x6, x7, x8 = out.decoder
        if self.cfg.mff:
            h = concat([upsample_bilinear(x5, 8), upsample_bilinear(x6, 4), upsample_bilinear(x7, 2), x8], axis=-1)
        else:
            h = x8
        h = upsample_bilinear(self.fuse(h), 4)
        return self.classify(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.mff_head(self.decode(self.encode(x)))

    def stages(self, x: Tensor) -> StageOutputs:
        return self.decode(self.encode(x))

    def attention_layers(self):
        for stage in (*self.encoder, *self.decoder):
            for blk in stage:
                yield blk.attn
