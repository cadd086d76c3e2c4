"""Pixel-shuffle upsampling and the 60 m -> 20 m -> 10 m latent fusion."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .fusion import FeatureVolume, FusionBlock, conv3x3, instance_normalize, pad_to_pow2, recursive_fuse


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Depth-to-space: (..., C*s*s, H, W) -> (..., C, s*H, s*W).

    Channel ``c*s*s + r*s + q`` at (y, x) lands at channel ``c``, position (s*y + r, s*x + q).
    """
    if x.shape[-3] % (s * s):
        raise ValueError(f"{x.shape[-3]} channels are not divisible by {s}^2")
    if s == 1:
        return x
    return F.pixel_shuffle(x, s)


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    if x.shape[-2] % s or x.shape[-1] % s:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {s}")
    if s == 1:
        return x
    return F.pixel_unshuffle(x, s)


class UpsampleBlock(nn.Module):
    """conv + instance norm, conv to C*s^2 maps, pixel shuffle, cleanup conv."""

    def __init__(self, channels: int, factor: int, generator=None):
        super().__init__()
        self.channels = channels
        self.factor = factor
        self.conv1 = conv3x3(channels, channels, generator)
        self.act1 = nn.PReLU(init=0.25)
        self.expand = conv3x3(channels, channels * factor * factor, generator)
        self.cleanup = conv3x3(channels, channels, generator)
        self.act2 = nn.PReLU(init=0.25)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {x.shape[-3]}")
        x = self.act1(instance_normalize(self.conv1(x)))
        x = pixel_shuffle(self.expand(x), self.factor)
        return self.act2(self.cleanup(x))


def fuse_present(block: nn.Module, maps: list[torch.Tensor | None]) -> torch.Tensor | None:
    """Two-slot recursive fusion where absent inputs are masked out."""
    present = [m for m in maps if m is not None]
    if not present:
        return None
    if len({tuple(m.shape) for m in present}) != 1:
        raise ValueError(f"cannot fuse maps of shapes {[tuple(m.shape) for m in present]}")
    vol = FeatureVolume.full(torch.stack(present, dim=1))
    # always two slots, so a lone input still goes through the gated update
    if vol.slots == 1:
        b, _, c, h, w = vol.values.shape
        vol = FeatureVolume(torch.cat([vol.values, vol.values.new_zeros(b, 1, c, h, w)], 1),
                            torch.cat([vol.mask, vol.mask.new_zeros(1)]))
    return recursive_fuse(pad_to_pow2(vol), block)


class CrossResolutionFusion(nn.Module):
    def __init__(self, channels: int, generator=None):
        super().__init__()
        self.up60 = UpsampleBlock(channels, 3, generator)
        self.fuse20 = FusionBlock(channels, generator)
        self.up20 = UpsampleBlock(channels, 2, generator)
        self.fuse10 = FusionBlock(channels, generator)

    def forward(self, g60=None, g20=None, g10=None) -> torch.Tensor:
        """Merge optional (B, C, H_r, W_r) group maps into one map on the 10 m grid."""
        if g60 is None and g20 is None and g10 is None:
            raise ValueError("no resolution group present")
        _check_ratios(g60, g20, g10)
        x = self.up60(g60) if g60 is not None else None
        x = fuse_present(self.fuse20, [g20, x])
        if x is not None:
            x = self.up20(x)
        return fuse_present(self.fuse10, [g10, x])


def _check_ratios(g60, g20, g10):
    grids = {}
    for g, k in ((g60, 6), (g20, 2), (g10, 1)):
        if g is not None:
            grids[k] = (g.shape[-2] * k, g.shape[-1] * k)
    if len(set(grids.values())) > 1:
        raise ValueError(f"group grids disagree on the 10 m size: {grids}")


def cross_fuse(module: CrossResolutionFusion, g60=None, g20=None, g10=None) -> torch.Tensor:
    return module(g60, g20, g10)
