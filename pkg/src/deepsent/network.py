"""The full super-resolution network and its parameter files.

Data flow for one scene: per-band embedding and temporal fusion, spectral
fusion inside each resolution group, cross-resolution fusion onto the 10 m
grid (the latent scene), then per-band reconstruction at 3x the 10 m grid,
merged with the bicubic temporal-mean skip input of the target band.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn

from . import resample
from .bands import BANDS, GROUP_BANDS, canonical, group_of, sort_bands
from .crossres import CrossResolutionFusion, pixel_shuffle
from .fusion import (EmbeddingBlock, FeatureVolume, FusionBlock, conv3x3, pad_to_pow2,
                     recursive_fuse, spectral_fuse, torch_median)
from .paramfile import ParameterFileError, read_container, write_container
from .scene import BandStatistics, SceneStack

OUTPUT_FACTOR = 3
FORMAT_VERSION = 1
MERGE_INITS = ("normal", "skip")


@dataclass
class NetworkConfig:
    feature_channels: int = 64
    eb_resblocks: int = 2
    output_factor: int = OUTPUT_FACTOR
    seed: int = 0
    # "normal": fan-in normal like every other conv; "skip": start as the bicubic skip
    merge_init: str = "skip"

    def __post_init__(self):
        if self.merge_init not in MERGE_INITS:
            raise ValueError(f"merge_init must be one of {MERGE_INITS}")
        if self.feature_channels < 1 or self.eb_resblocks < 0:
            raise ValueError("feature_channels must be >= 1 and eb_resblocks >= 0")
        if self.output_factor != OUTPUT_FACTOR:
            raise ValueError("output_factor is fixed at 3")

    @classmethod
    def micro(cls, seed: int = 0, **kwargs) -> "NetworkConfig":
        return cls(feature_channels=8, eb_resblocks=1, seed=seed, **kwargs)


def _identity_stats() -> BandStatistics:
    return BandStatistics({b: 0.0 for b in BANDS}, {b: 1.0 for b in BANDS})


def pass_through_skip(conv: nn.Conv2d) -> None:
    """Set a (reconstruction, skip) -> 1 merge conv to copy the skip channel."""
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[0, 1, 1, 1] = 1.0
        conv.bias.zero_()


class DeepSent(nn.Module):
    """Spectro-temporal fusion network with per-band heads for all 12 bands."""

    def __init__(self, config: NetworkConfig | None = None, stats: BandStatistics | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        c = config.feature_channels
        gen = torch.Generator().manual_seed(config.seed)
        self.embed = nn.ModuleDict({b: EmbeddingBlock(c, config.eb_resblocks, gen) for b in BANDS})
        self.temporal = nn.ModuleDict({b: FusionBlock(c, gen) for b in BANDS})
        self.spectral = nn.ModuleDict({f"g{g}": FusionBlock(c, gen) for g in GROUP_BANDS})
        self.cross = CrossResolutionFusion(c, gen)
        self.reconstruct = nn.ModuleDict({b: conv3x3(c, OUTPUT_FACTOR ** 2, gen) for b in BANDS})
        self.merge = nn.ModuleDict({b: conv3x3(2, 1, gen) for b in BANDS})
        if config.merge_init == "skip":
            for conv in self.merge.values():
                pass_through_skip(conv)
        self.register_buffer("band_mean", torch.zeros(len(BANDS)))
        self.register_buffer("band_std", torch.ones(len(BANDS)))
        self.set_stats(stats or _identity_stats())

    # -- statistics --------------------------------------------------------

    def set_stats(self, stats: BandStatistics) -> None:
        for i, b in enumerate(BANDS):
            if b in stats.mean:
                self.band_mean[i] = stats.mean[b]
                self.band_std[i] = stats.std[b]

    @property
    def stats(self) -> BandStatistics:
        m, s = self.band_mean.tolist(), self.band_std.tolist()
        return BandStatistics(dict(zip(BANDS, m)), dict(zip(BANDS, s)))

    def normalize(self, x: torch.Tensor, band: str) -> torch.Tensor:
        i = BANDS.index(band)
        return (x - self.band_mean[i]) / self.band_std[i]

    def denormalize(self, x: torch.Tensor, band: str) -> torch.Tensor:
        i = BANDS.index(band)
        return x * self.band_std[i] + self.band_mean[i]

    # -- stages ------------------------------------------------------------

    def fuse_band(self, band: str, images: torch.Tensor) -> torch.Tensor:
        """Embedding + temporal fusion of raw (B, T, H, W) reflectance -> (B, C, H, W)."""
        x = self.normalize(images, band)
        med = torch_median(x, dim=1)
        vol = pad_to_pow2(FeatureVolume.full(self.embed[band](x, med)))
        return recursive_fuse(vol, self.temporal[band])

    def encode(self, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """Latent scene on the 10 m grid from ``{band: (B, T, H_r, W_r)}`` reflectance."""
        if not inputs:
            raise ValueError("no input bands")
        fused = {canonical(b): self.fuse_band(canonical(b), x) for b, x in inputs.items()}
        groups = {}
        for gsd, order in GROUP_BANDS.items():
            present = {b: fused[b] for b in order if b in fused}
            if present:
                groups[gsd] = spectral_fuse(present, order, self.spectral[f"g{gsd}"])
        return self.cross(groups.get(60), groups.get(20), groups.get(10))

    def skip_input(self, band: str, images: torch.Tensor) -> torch.Tensor:
        """Standardized bicubic temporal mean on the output grid, (B, 1, H_o, W_o)."""
        f = group_of(band).upscale_to_output
        h, w = images.shape[-2:]
        ry = torch.tensor(resample.resize_matrix(h, h * f), dtype=images.dtype)
        rx = torch.tensor(resample.resize_matrix(w, w * f), dtype=images.dtype)
        mean = self.normalize(images, band).mean(dim=1)
        return (ry @ mean @ rx.T)[:, None]

    def reconstruct_band(self, latent: torch.Tensor, band: str) -> torch.Tensor:
        """(B, C, H, W) latent -> (B, 1, 3H, 3W) standardized reconstruction."""
        return pixel_shuffle(self.reconstruct[band](latent), OUTPUT_FACTOR)

    def skip_merge(self, recon: torch.Tensor, skip: torch.Tensor, band: str) -> torch.Tensor:
        if recon.shape != skip.shape:
            raise ValueError(f"reconstruction {tuple(recon.shape)} vs skip {tuple(skip.shape)}")
        return self.merge[band](torch.cat([recon, skip], dim=1))

    def head(self, latent: torch.Tensor, band: str, images: torch.Tensor) -> torch.Tensor:
        """Standardized SR output (B, 1, H_o, W_o) for one band."""
        return self.skip_merge(self.reconstruct_band(latent, band), self.skip_input(band, images), band)

    def forward(self, inputs: Mapping[str, torch.Tensor], target: str) -> torch.Tensor:
        """Super-resolved reflectance (B, H_o, W_o) of ``target``."""
        target = canonical(target)
        if target not in {canonical(b) for b in inputs}:
            raise KeyError(f"target band {target} is not among the inputs")
        latent = self.encode(inputs)
        return self.denormalize(self.head(latent, target, inputs[target])[:, 0], target)

    def forward_bands(self, inputs: Mapping[str, torch.Tensor], bands=None) -> dict[str, torch.Tensor]:
        """Like :meth:`forward` for several targets, sharing one latent."""
        inputs = {canonical(b): x for b, x in inputs.items()}
        bands = sort_bands(inputs if bands is None else bands)
        latent = self.encode(inputs)
        return {b: self.denormalize(self.head(latent, b, inputs[b])[:, 0], b) for b in bands}


# ---------------------------------------------------------------------------
# numpy-facing wrappers


def stack_inputs(stacks, dtype=torch.float32, n_images=None, bands=None) -> dict[str, torch.Tensor]:
    """Batch scenes with matching band sets and shapes into ``{band: (B, T, H, W)}``."""
    stacks = list(stacks)
    bands = sort_bands(stacks[0].bands if bands is None else bands)
    out = {}
    for b in bands:
        arrs = []
        for st in stacks:
            imgs = st.series[b].images
            if n_images is not None:
                imgs = imgs[n_images] if not isinstance(n_images, int) else imgs[:n_images]
            arrs.append(imgs)
        out[b] = torch.from_numpy(np.stack(arrs)).to(dtype)
    return out


def forward(stack: SceneStack, target_band: str, model: DeepSent) -> np.ndarray:
    """Super-resolve one band of a scene; returns a float32 reflectance raster."""
    target_band = canonical(target_band)
    if target_band not in stack.series:
        raise KeyError(f"target band {target_band} is absent from the scene")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(stack_inputs([stack], dtype), target_band)
    return out[0].numpy().astype(np.float32)


def forward_all_bands(stack: SceneStack, model: DeepSent, bands=None) -> dict[str, np.ndarray]:
    """Super-resolve every band present in the scene (or a subset of them)."""
    dtype = next(model.parameters()).dtype
    bands = stack.bands if bands is None else sort_bands(bands)
    missing = [b for b in bands if b not in stack.series]
    if missing:
        raise KeyError(f"bands absent from the scene: {missing}")
    with torch.no_grad():
        out = model.forward_bands(stack_inputs([stack], dtype), bands)
    return {b: v[0].numpy().astype(np.float32) for b, v in out.items()}


# ---------------------------------------------------------------------------
# parameter files


def model_meta(model: DeepSent) -> dict:
    return {"format": "deepsent-parameters", "version": FORMAT_VERSION,
            "config": asdict(model.config), "band_stats": model.stats.to_dict()}


def model_tensors(model: DeepSent, prefix: str = "params/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_model(model: DeepSent, path, extra_meta: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    meta = model_meta(model)
    meta.update(extra_meta or {})
    tensors = model_tensors(model)
    tensors.update(extra_tensors or {})
    write_container(path, meta, tensors)


def model_from_container(meta: dict, tensors: dict[str, np.ndarray], prefix: str = "params/") -> DeepSent:
    try:
        config = NetworkConfig(**meta["config"])
        stats = BandStatistics.from_dict(meta["band_stats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterFileError(f"bad network header: {exc}") from exc
    model = DeepSent(config, stats)
    expected = model.state_dict()
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(state) != set(expected):
        missing, unknown = set(expected) - set(state), set(state) - set(expected)
        raise ParameterFileError(f"tensor set mismatch: missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ParameterFileError(f"{k}: shape {v.shape} does not match config {tuple(expected[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    return model


def load_model(path) -> DeepSent:
    meta, tensors = read_container(path)
    return model_from_container(meta, tensors)
