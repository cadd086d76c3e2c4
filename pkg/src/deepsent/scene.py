"""Scene data model, the on-disk scene container and shared pre/post-processing.

A container is a directory holding ``manifest.json`` plus one ``<code>_<index>.raw``
file per (band, time) with ``height * width`` little-endian float32 values in
row-major order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import resample
from .bands import GROUP_BY_GSD, canonical, group_of, sort_bands

MANIFEST = "manifest.json"
DTYPE_TAG = "f32le"

# "native": bands on their own resolution grids (LR inputs).
# "uniform": every band on one common grid (HR references, SR outputs).
LAYOUTS = ("native", "uniform")


class SceneError(ValueError):
    """A scene violates the data-model invariants."""


class LoadError(OSError):
    """Base class for container read failures."""


class MissingFileError(LoadError):
    pass


class DimensionMismatchError(LoadError):
    pass


class NonFiniteError(LoadError):
    pass


class ManifestError(LoadError):
    pass


@dataclass
class BandSeries:
    """All temporal images of one band, shape ``(n_images, height, width)``."""

    band: str
    images: np.ndarray
    timestamps: list | None = None

    def __post_init__(self):
        self.band = canonical(self.band)
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = imgs[None]
        if imgs.ndim != 3 or imgs.shape[0] < 1 or imgs.shape[1] < 1 or imgs.shape[2] < 1:
            raise SceneError(f"{self.band}: expected (N>=1, H>=1, W>=1) images, got {imgs.shape}")
        if not np.isfinite(imgs).all():
            raise SceneError(f"{self.band}: non-finite reflectance")
        if self.timestamps is not None:
            ts = list(self.timestamps)
            if len(ts) != imgs.shape[0] or any(b < a for a, b in zip(ts, ts[1:])):
                raise SceneError(f"{self.band}: timestamps must be monotone, one per image")
        self.images = imgs

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def first(self, k: int) -> "BandSeries":
        ts = None if self.timestamps is None else self.timestamps[:k]
        return BandSeries(self.band, self.images[:k], ts)


@dataclass
class SceneStack:
    """A temporal stack of multiband rasters keyed by band code."""

    series: dict[str, BandSeries]
    scene_id: str = "scene"
    layout: str = "native"
    degradation_ref: str | None = None

    def __post_init__(self):
        if not self.series:
            raise SceneError("a scene needs at least one band")
        if self.layout not in LAYOUTS:
            raise SceneError(f"unknown layout {self.layout!r}")
        fixed = {}
        for code, s in self.series.items():
            if not isinstance(s, BandSeries):
                s = BandSeries(code, s)
            if canonical(code) != s.band:
                raise SceneError(f"series keyed {code!r} holds band {s.band}")
            fixed[s.band] = s
        self.series = {b: fixed[b] for b in sort_bands(fixed)}
        self._check_dims()

    def _check_dims(self):
        if self.layout == "uniform":
            shapes = {s.shape for s in self.series.values()}
            if len(shapes) != 1:
                raise SceneError(f"uniform layout with differing shapes {shapes}")
            return
        base = None
        for s in self.series.values():
            k = group_of(s.band).downscale_vs_10m
            h, w = s.shape
            grid10 = (h * k, w * k)
            if base is None:
                base = grid10
            elif grid10 != base:
                raise SceneError(
                    f"{s.band}: {h}x{w} inconsistent with the 10 m grid {base[0]}x{base[1]}")

    @property
    def bands(self) -> list[str]:
        return list(self.series)

    def grid10(self) -> tuple[int, int]:
        """Height/width of the 10 m grid, inferred from any present band."""
        s = next(iter(self.series.values()))
        if self.layout == "uniform":
            return s.shape
        k = group_of(s.band).downscale_vs_10m
        return s.shape[0] * k, s.shape[1] * k

    def subset(self, bands=None, n_images: int | None = None) -> "SceneStack":
        """Restrict to some bands and/or the first ``n_images`` temporal images."""
        keep = self.bands if bands is None else sort_bands(bands)
        missing = [b for b in keep if b not in self.series]
        if missing:
            raise KeyError(f"bands not in scene: {missing}")
        series = {}
        for b in keep:
            s = self.series[b]
            series[b] = s.first(n_images) if n_images else s
        return SceneStack(series, self.scene_id, self.layout, self.degradation_ref)

    def manifest(self) -> dict:
        entries = []
        for s in self.series.values():
            gsd = group_of(s.band).gsd_m
            entries.append({"code": s.band, "gsd_m": gsd, "n_images": s.n_images,
                            "height": s.shape[0], "width": s.shape[1]})
            if s.timestamps is not None:
                entries[-1]["timestamps"] = list(s.timestamps)
        out = {"scene_id": self.scene_id, "bands": entries, "dtype": DTYPE_TAG}
        if self.layout != "native":
            out["layout"] = self.layout
        if self.degradation_ref is not None:
            out["degradation_ref"] = self.degradation_ref
        return out


@dataclass
class BandStatistics:
    """Per-band reflectance mean and standard deviation of a training corpus."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.mean = {canonical(k): float(v) for k, v in self.mean.items()}
        self.std = {canonical(k): float(v) for k, v in self.std.items()}
        if set(self.mean) != set(self.std):
            raise SceneError("mean and std must cover the same bands")
        for b, s in self.std.items():
            if not s > 0:
                raise SceneError(f"{b}: std must be positive, got {s}")

    @classmethod
    def from_stacks(cls, stacks) -> "BandStatistics":
        """Pooled statistics over every image of every stack (float64 accumulation)."""
        sums: dict[str, list[float]] = {}
        for st in stacks:
            for b, s in st.series.items():
                x = s.images.astype(np.float64)
                acc = sums.setdefault(b, [0.0, 0.0, 0])
                acc[0] += x.sum()
                acc[1] += np.square(x).sum()
                acc[2] += x.size
        mean, std = {}, {}
        for b, (s1, s2, n) in sums.items():
            m = s1 / n
            mean[b] = m
            std[b] = max(float(np.sqrt(max(s2 / n - m * m, 0.0))), 1e-6)
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BandStatistics":
        return cls(dict(d["mean"]), dict(d["std"]))


# ---------------------------------------------------------------------------
# container I/O


def save_scene(stack: SceneStack, path) -> None:
    """Write ``stack`` as a scene container directory (created if missing)."""
    if not isinstance(stack, SceneStack) or not stack.series:
        raise SceneError("nothing to save: empty scene")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in stack.series.values():
        for i, img in enumerate(s.images):
            (path / f"{s.band}_{i}.raw").write_bytes(img.astype("<f4").tobytes(order="C"))
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(stack.manifest(), indent=2), encoding="utf-8")
    os.replace(tmp, path / MANIFEST)


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise MissingFileError(f"{mpath}: no manifest")
    try:
        man = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: {exc}") from exc
    for key in ("scene_id", "bands", "dtype"):
        if key not in man:
            raise ManifestError(f"{mpath}: missing key {key!r}")
    if man["dtype"] != DTYPE_TAG:
        raise ManifestError(f"{mpath}: unsupported dtype {man['dtype']!r}")
    return man


def load_scene(path) -> SceneStack:
    """Read and validate a scene container written by :func:`save_scene`."""
    path = Path(path)
    man = read_manifest(path)
    series = {}
    for entry in man["bands"]:
        code = canonical(entry["code"])
        if entry.get("gsd_m") not in GROUP_BY_GSD or group_of(code).gsd_m != entry["gsd_m"]:
            raise ManifestError(f"{code}: bad gsd_m {entry.get('gsd_m')!r}")
        h, w, n = int(entry["height"]), int(entry["width"]), int(entry["n_images"])
        imgs = np.empty((n, h, w), dtype=np.float32)
        for i in range(n):
            f = path / f"{code}_{i}.raw"
            if not f.is_file():
                raise MissingFileError(f"{f}: missing raster")
            raw = f.read_bytes()
            if len(raw) != 4 * h * w:
                got = len(raw) // 4
                raise DimensionMismatchError(
                    f"{f}: holds {got} values, manifest says {h}x{w}={h * w}")
            imgs[i] = np.frombuffer(raw, dtype="<f4").reshape(h, w)
        if not np.isfinite(imgs).all():
            raise NonFiniteError(f"{path}: band {code} has non-finite values")
        series[code] = BandSeries(code, imgs, entry.get("timestamps"))
    try:
        return SceneStack(series, man["scene_id"], man.get("layout", "native"),
                          man.get("degradation_ref"))
    except SceneError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# processing


def median_band(series: BandSeries) -> np.ndarray:
    """Per-pixel temporal median; even counts take the midpoint of the central pair."""
    imgs = series.images if isinstance(series, BandSeries) else np.asarray(series, np.float32)
    s = np.sort(imgs.astype(np.float64), axis=0)
    n = s.shape[0]
    if n % 2:
        return s[n // 2].astype(np.float32)
    return (0.5 * (s[n // 2 - 1] + s[n // 2])).astype(np.float32)


def _stats_for(band: str, stats: BandStatistics) -> tuple[float, float]:
    band = canonical(band)
    if band not in stats.mean:
        raise KeyError(f"no statistics for band {band}")
    return stats.mean[band], stats.std[band]


def zscore_normalize(raster: np.ndarray, band: str, stats: BandStatistics) -> np.ndarray:
    mean, std = _stats_for(band, stats)
    return ((np.asarray(raster, np.float64) - mean) / std).astype(np.float32)


def zscore_denormalize(raster: np.ndarray, band: str, stats: BandStatistics) -> np.ndarray:
    mean, std = _stats_for(band, stats)
    return (np.asarray(raster, np.float64) * std + mean).astype(np.float32)


def temporal_mean_bicubic(series: BandSeries, factor: int) -> np.ndarray:
    """Temporal mean of a band series, bicubically upsampled to the output grid.

    ``factor`` must equal the band's upscale to the output grid (3, 6 or 18).
    """
    expected = group_of(series.band).upscale_to_output
    if factor != expected:
        raise ValueError(f"{series.band} needs factor {expected}, got {factor}")
    mean = series.images.astype(np.float64).mean(axis=0)
    return resample.upsample(mean, factor).astype(np.float32)

