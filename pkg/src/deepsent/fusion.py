"""Embedding blocks and recursive (temporal / spectral) feature fusion.

Feature volumes are batched: ``values`` has shape ``(B, T, C, H, W)`` where ``T``
counts temporal images (or bands, for spectral fusion) and ``mask`` is the
binary vector marking which of the ``T`` slots hold real data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scene import BandSeries, BandStatistics, median_band, zscore_normalize

IN_EPS = 1e-5


def init_conv(conv: nn.Conv2d, generator: torch.Generator | None = None) -> None:
    """Fan-in scaled normal weights, zero bias."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    with torch.no_grad():
        nn.init.normal_(conv.weight, 0.0, fan_in ** -0.5, generator=generator)
        if conv.bias is not None:
            conv.bias.zero_()


def conv3x3(cin: int, cout: int, generator=None) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 3, padding=1)
    init_conv(conv, generator)
    return conv


class ResBlock(nn.Module):
    def __init__(self, channels: int, generator=None):
        super().__init__()
        self.conv1 = conv3x3(channels, channels, generator)
        self.act = nn.PReLU(init=0.25)
        self.conv2 = conv3x3(channels, channels, generator)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class EmbeddingBlock(nn.Module):
    """Maps an (image, median) pair to ``channels`` feature maps."""

    def __init__(self, channels: int = 64, n_resblocks: int = 2, generator=None):
        super().__init__()
        self.conv_in = conv3x3(2, channels, generator)
        self.act_in = nn.PReLU(init=0.25)
        self.res = nn.Sequential(*[ResBlock(channels, generator) for _ in range(n_resblocks)])
        self.conv_out = conv3x3(channels, channels, generator)
        self.act_out = nn.PReLU(init=0.25)

    def forward(self, images: torch.Tensor, median: torch.Tensor) -> torch.Tensor:
        """``images`` (B, T, H, W) and ``median`` (B, H, W) -> (B, T, C, H, W)."""
        b, t, h, w = images.shape
        pair = torch.stack([images, median[:, None].expand(b, t, h, w)], dim=2)
        x = self.act_in(self.conv_in(pair.reshape(b * t, 2, h, w)))
        x = self.act_out(self.conv_out(self.res(x)))
        return x.reshape(b, t, -1, h, w)


class FusionBlock(nn.Module):
    """Residual block ``f(s1, s2)`` merging two feature maps of equal size."""

    def __init__(self, channels: int = 64, generator=None):
        super().__init__()
        self.conv_a = conv3x3(2 * channels, channels, generator)
        self.act_a = nn.PReLU(init=0.25)
        self.conv_b = conv3x3(channels, channels, generator)
        self.act_b = nn.PReLU(init=0.25)

    def forward(self, s1: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
        """Pairs of shape (B, n, C, H, W) -> (B, n, C, H, W)."""
        b, n, c, h, w = s1.shape
        x = torch.cat([s1, s2], dim=2).reshape(b * n, 2 * c, h, w)
        x = self.act_a(self.conv_a(x))
        x = x + self.act_b(self.conv_b(x))
        return x.reshape(b, n, c, h, w)


@dataclass
class FeatureVolume:
    values: torch.Tensor  # (B, T, C, H, W)
    mask: torch.Tensor  # (T,), 1 = real slot, 0 = zero pad

    def __post_init__(self):
        if self.values.ndim != 5:
            raise ValueError(f"expected (B, T, C, H, W) values, got {tuple(self.values.shape)}")
        if self.mask.shape != (self.values.shape[1],):
            raise ValueError("mask length must equal the slot count")

    @property
    def slots(self) -> int:
        return self.values.shape[1]

    @classmethod
    def full(cls, values: torch.Tensor) -> "FeatureVolume":
        return cls(values, torch.ones(values.shape[1], dtype=values.dtype))


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def pad_to_pow2(vol: FeatureVolume) -> FeatureVolume:
    """Append zero slots (mask 0) until the slot count is a power of two."""
    t = vol.slots
    extra = next_pow2(t) - t
    if extra == 0:
        return vol
    b, _, c, h, w = vol.values.shape
    pad = vol.values.new_zeros((b, extra, c, h, w))
    return FeatureVolume(torch.cat([vol.values, pad], dim=1),
                         torch.cat([vol.mask, vol.mask.new_zeros(extra)]))


def recursive_fuse(vol: FeatureVolume, block: nn.Module, dense: bool = False) -> torch.Tensor:
    """Halve the slot axis until one map is left: ``X <- s1 + a2 * f(s1, s2)``.

    ``block`` is evaluated only for slot pairs whose second half is real, which
    is exactly the update for a binary mask. With ``dense=True`` it runs on every
    pair and the mask multiplies the result instead (same values, up to the
    batch-size dependence of convolution kernels).
    Returns (B, C, H, W).
    """
    if not is_pow2(vol.slots):
        raise ValueError(f"slot count {vol.slots} is not a power of two")
    x, a = vol.values, vol.mask
    while x.shape[1] > 1:
        half = x.shape[1] // 2
        s1, s2 = x[:, :half], x[:, half:]
        a1, a2 = a[:half], a[half:]
        if dense:
            x = s1 + a2.view(1, -1, 1, 1, 1) * block(s1, s2)
        else:
            active = [t for t in range(half) if float(a2[t]) != 0.0]
            if active:
                idx = torch.tensor(active, dtype=torch.long)
                upd = s1[:, idx] + a2[idx].view(1, -1, 1, 1, 1) * block(s1[:, idx], s2[:, idx])
                slots = list(s1.unbind(1))
                for j, t in enumerate(active):
                    slots[t] = upd[:, j]
                x = torch.stack(slots, dim=1)
            else:
                x = s1
        a = a1
    return x[:, 0]


def fuse_unpadded(values: torch.Tensor, block: nn.Module) -> torch.Tensor:
    """Same result as ``recursive_fuse(pad_to_pow2(...))`` without materializing pads."""
    x = values
    n = x.shape[1]
    size = next_pow2(n)
    while size > 1:
        half = size // 2
        n1, n2 = min(n, half), max(0, n - half)
        s1 = x[:, :n1]
        if n2:
            upd = s1[:, :n2] + 1.0 * block(s1[:, :n2], x[:, half:half + n2])
            x = torch.cat([upd, s1[:, n2:]], dim=1)
        else:
            x = s1
        n, size = n1, half
    if n == 0:
        return values.new_zeros(values.shape[0], *values.shape[2:])
    return x[:, 0]


def instance_normalize(x: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """Per-channel spatial standardization of (..., C, H, W) features, no affine."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = (x - mean).square().mean(dim=(-2, -1), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def spectral_fuse(per_band: dict[str, torch.Tensor], order, block: nn.Module) -> torch.Tensor:
    """Fuse (B, C, H, W) maps of one resolution group.

    ``order`` is the canonical band order of the group; bands missing from
    ``per_band`` are skipped and the stack is padded at the tail.
    """
    maps = [instance_normalize(per_band[b]) for b in order if b in per_band]
    if not maps:
        raise ValueError("spectral fusion needs at least one band")
    shapes = {tuple(m.shape) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"band maps differ in shape: {sorted(shapes)}")
    vol = pad_to_pow2(FeatureVolume.full(torch.stack(maps, dim=1)))
    return recursive_fuse(vol, block)


def torch_median(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Median along ``dim``; even counts average the two central values."""
    s, _ = torch.sort(x, dim=dim)
    n = x.shape[dim]
    if n % 2:
        return s.select(dim, n // 2)
    return 0.5 * (s.select(dim, n // 2 - 1) + s.select(dim, n // 2))


def embed_band(series: BandSeries, stats: BandStatistics, block: EmbeddingBlock,
               dtype=torch.float32) -> FeatureVolume:
    """Embed every temporal image of one band; the result has an all-ones mask."""
    norm = np.stack([zscore_normalize(img, series.band, stats) for img in series.images])
    med = median_band(BandSeries(series.band, norm))
    images = torch.from_numpy(norm).to(dtype)[None]
    median = torch.from_numpy(med).to(dtype)[None]
    return FeatureVolume.full(block(images, median))
