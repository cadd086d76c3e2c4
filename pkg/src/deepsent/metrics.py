"""Compensated quality metrics, spectral angles and artifact heat-maps.

cMSE/cPSNR/cSSIM follow the usual MISR convention: the reference is cropped by
``d`` pixels on each side, the SR image is scanned over every integer offset in
``[0, 2d]^2`` and the brightness bias is removed per offset before scoring.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import resample
from .bands import GROUP_BANDS, group_of, sort_bands
from .scene import SceneStack

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SAM_EPS = 1e-12


def _pair(sr, hr, d: int) -> tuple[np.ndarray, np.ndarray]:
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape or sr.ndim != 2:
        raise ValueError(f"sr {sr.shape} and hr {hr.shape} must be equal 2-D shapes")
    if d < 0:
        raise ValueError("border d must be >= 0")
    if min(hr.shape) <= 2 * d:
        raise ValueError(f"{hr.shape[0]}x{hr.shape[1]} raster is too small for border d={d}")
    return sr, hr


def _windows(sr: np.ndarray, hr: np.ndarray, d: int):
    h, w = hr.shape
    hc, wc = h - 2 * d, w - 2 * d
    hr_crop = hr[d:d + hc, d:d + wc]
    for u in range(2 * d + 1):
        for v in range(2 * d + 1):
            yield u, v, hr_crop, sr[u:u + hc, v:v + wc]


def cmse(sr, hr, d: int = 3) -> float:
    """Minimum brightness-compensated MSE over integer offsets in ``[0, 2d]^2``."""
    sr, hr = _pair(sr, hr, d)
    best = math.inf
    for _, _, ref, win in _windows(sr, hr, d):
        diff = ref - win
        diff = diff - diff.mean()
        best = min(best, float(np.mean(diff * diff)))
    return best


def cpsnr(sr, hr, d: int = 3, dynamic_range: float = 1.0) -> float:
    """Compensated PSNR in dB, capped at 100 dB."""
    err = cmse(sr, hr, d)
    dr2 = dynamic_range * dynamic_range
    if err < dr2 * 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(dr2 / err))


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    h, w = img.shape
    tmp = sum(k[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(k[i] * tmp[:, i:w - n + 1 + i] for i in range(n))


def ssim(x, y, dynamic_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"{x.shape[0]}x{x.shape[1]} is smaller than the {SSIM_WINDOW}px SSIM window")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    k = _gauss_window()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


def cssim(sr, hr, d: int = 3, dynamic_range: float = 1.0) -> float:
    """Maximum SSIM over offsets, after removing each offset's brightness bias."""
    sr, hr = _pair(sr, hr, d)
    if min(hr.shape) - 2 * d < SSIM_WINDOW:
        raise ValueError(f"cropped raster is smaller than the {SSIM_WINDOW}px SSIM window")
    best = -math.inf
    for _, _, ref, win in _windows(sr, hr, d):
        beta = float(np.mean(ref - win))
        best = max(best, ssim(ref, win + beta, dynamic_range))
    return best


def sam(x, y, eps: float = SAM_EPS) -> float:
    """Mean spectral angle (radians) between (bands, H, W) grids."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.shape[0] < 2:
        raise ValueError("SAM needs (bands >= 2, H, W) grids")
    dot = (x * y).sum(axis=0)
    norm = np.sqrt((x * x).sum(axis=0)) * np.sqrt((y * y).sum(axis=0))
    cos = np.clip(dot / (norm + eps), -1.0, 1.0)
    return float(np.arccos(cos).mean())


def _to_60m(img: np.ndarray, factor: int) -> np.ndarray:
    # interpolating (non-antialiased) kernel: undoes bicubic upsampling almost exactly
    return resample.downsample(img, factor, antialias=False) if factor > 1 else np.asarray(img, np.float64)


def sam_consistency(sr: Mapping[str, np.ndarray], lr: SceneStack, return_all: bool = False):
    """Spectral angle between the SR result and its closest LR acquisition.

    Every SR band (on the output grid) and every LR image are brought to the
    60 m grid by bicubic downsampling; the SAM against each temporal index is
    computed and the minimum returned. Only indices present in every band are
    candidates.
    """
    if not lr.series:
        raise ValueError("empty LR stack")
    bands = sort_bands(lr.bands)
    missing = [b for b in bands if b not in sr]
    if missing:
        raise KeyError(f"SR result lacks bands {missing}")
    h10, w10 = lr.grid10()
    for b in bands:
        if np.shape(sr[b]) != (3 * h10, 3 * w10):
            raise ValueError(f"{b}: SR raster {np.shape(sr[b])} is not on the output grid {(3 * h10, 3 * w10)}")
    sr_down = np.stack([_to_60m(sr[b], 18) for b in bands])
    n = min(lr.series[b].n_images for b in bands)
    scores = []
    for i in range(n):
        lr_down = np.stack([_to_60m(lr.series[b].images[i], 6 // group_of(b).downscale_vs_10m)
                            for b in bands])
        scores.append(sam(sr_down, lr_down))
    return (min(scores), scores) if return_all else min(scores)


def temporal_std_maps(lr: SceneStack) -> dict[str, np.ndarray]:
    """Per-band, per-pixel temporal standard deviation (population)."""
    return {b: s.images.astype(np.float64).std(axis=0) for b, s in lr.series.items()}


def artifact_heatmap(lr: SceneStack) -> np.ndarray:
    """Artifact-likelihood map on the 10 m grid, min-max scaled to [0, 1]."""
    short = [b for b, s in lr.series.items() if s.n_images < 2]
    if short:
        raise ValueError(f"bands with fewer than 2 images: {short}")
    h10, w10 = lr.grid10()
    acc = np.zeros((h10, w10))
    for b, m in temporal_std_maps(lr).items():
        acc += resample.resize(m, (h10, w10)) if m.shape != (h10, w10) else m
    acc /= len(lr.series)
    lo, hi = acc.min(), acc.max()
    if hi - lo <= 0:
        return np.zeros((h10, w10), np.float32)
    return ((acc - lo) / (hi - lo)).astype(np.float32)


def heatmap_to_u8(heat: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(heat, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img_u8: np.ndarray) -> None:
    h, w = img_u8.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img_u8.tobytes())


# ---------------------------------------------------------------------------
# reports


@dataclass
class BandScore:
    patch_id: str
    band: str
    cpsnr: float
    cssim: float | None = None
    lpips: float | None = None  # reserved for externally computed values
    niqe: float | None = None


@dataclass
class PatchScore:
    patch_id: str
    sam: float | None = None
    consistency_sam: float | None = None
    heatmap: str | None = None


@dataclass
class MetricsReport:
    scores: list[BandScore] = field(default_factory=list)
    patches: list[PatchScore] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def _agg(self, values) -> dict:
        v = np.array([x for x in values if x is not None], dtype=np.float64)
        if v.size == 0:
            return {"mean": None, "std": None, "n": 0}
        return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}

    def aggregates(self) -> dict:
        out = {"band": {}, "group": {}}
        for b in sort_bands({s.band for s in self.scores}):
            rows = [s for s in self.scores if s.band == b]
            out["band"][b] = {"cpsnr": self._agg(r.cpsnr for r in rows),
                              "cssim": self._agg(r.cssim for r in rows)}
        for gsd, members in GROUP_BANDS.items():
            rows = [s for s in self.scores if s.band in members]
            if rows:
                out["group"][f"{gsd}m"] = {"cpsnr": self._agg(r.cpsnr for r in rows),
                                           "cssim": self._agg(r.cssim for r in rows)}
        out["sam"] = self._agg(p.sam for p in self.patches)
        out["consistency_sam"] = self._agg(p.consistency_sam for p in self.patches)
        return out

    def mean_cpsnr(self, bands=None) -> float:
        rows = [s.cpsnr for s in self.scores if bands is None or s.band in bands]
        return float(np.mean(rows))

    def to_dict(self) -> dict:
        return {"settings": self.settings,
                "scores": [asdict(s) for s in self.scores],
                "patches": [asdict(p) for p in self.patches],
                "aggregates": self.aggregates()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls([BandScore(**s) for s in d.get("scores", [])],
                   [PatchScore(**p) for p in d.get("patches", [])],
                   dict(d.get("settings", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def score_patch(patch_id: str, sr: Mapping[str, np.ndarray], hr: Mapping[str, np.ndarray],
                d: int = 3, dynamic_range: float = 1.0, lr: SceneStack | None = None,
                with_ssim: bool = True) -> tuple[list[BandScore], PatchScore]:
    """Score one super-resolved patch against its HR reference."""
    bands = sort_bands(sr)
    rows = []
    for b in bands:
        if b not in hr:
            raise KeyError(f"reference lacks band {b}")
        rows.append(BandScore(patch_id, b, cpsnr(sr[b], hr[b], d, dynamic_range),
                              cssim(sr[b], hr[b], d, dynamic_range) if with_ssim else None))
    patch = PatchScore(patch_id)
    if len(bands) >= 2:
        patch.sam = sam(np.stack([sr[b] for b in bands]), np.stack([hr[b] for b in bands]))
    if lr is not None:
        patch.consistency_sam = sam_consistency(sr, lr.subset(bands))
    return rows, patch
