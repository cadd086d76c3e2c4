"""Simulation of LR Sentinel-2 stacks from HR patches, and dataset building.

Every LR image is produced by: sub-pixel translation shared across bands,
per-band contrast/brightness change, per-band Gaussian blur and additive
Gaussian noise, and finally bicubic downsampling by 3, 6 or 18 depending on
the band's resolution group. All random draws come from Philox streams keyed
by ``(seed, patch_id, time_index, band)``, so a patch can be regenerated in
isolation and in any order.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import resample
from .bands import BANDS, canonical, group_of, sort_bands
from .scene import BandSeries, SceneStack, load_scene, save_scene

HR_MULTIPLE = 18
DATASET_MANIFEST = "dataset.json"


class DegradationError(ValueError):
    pass


def _interval(name, v, nonneg=False):
    lo, hi = (float(x) for x in v)
    if lo > hi:
        raise DegradationError(f"{name}: lower bound {lo} > upper bound {hi}")
    if nonneg and lo < 0:
        raise DegradationError(f"{name}: must be >= 0")
    return lo, hi


@dataclass
class DegradationParams:
    """Sampling ranges of the LR simulation. Shift and blur are in HR pixels."""

    shift_range: float = 1.5
    contrast_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (-0.05, 0.05)
    blur_sigma_range: tuple[float, float] = (0.4, 1.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    n_lr_images: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.shift_range < 0:
            raise DegradationError("shift_range must be >= 0")
        self.contrast_range = _interval("contrast_range", self.contrast_range)
        self.brightness_range = _interval("brightness_range", self.brightness_range)
        self.blur_sigma_range = _interval("blur_sigma_range", self.blur_sigma_range, True)
        self.noise_sigma_range = _interval("noise_sigma_range", self.noise_sigma_range, True)
        if int(self.n_lr_images) < 1:
            raise DegradationError("n_lr_images must be >= 1")
        self.n_lr_images = int(self.n_lr_images)
        self.seed = int(self.seed)


@dataclass
class BandDegradation:
    contrast: float
    brightness: float
    blur_sigma: float
    noise_sigma: float
    noise_seed: int


@dataclass
class TemporalInstance:
    dx: float
    dy: float
    bands: dict[str, BandDegradation]


@dataclass
class DegradationRecord:
    """Everything needed to regenerate one simulated LR stack bit for bit."""

    patch_id: str
    hr_shape: tuple[int, int]
    instances: list[TemporalInstance] = field(default_factory=list)

    @property
    def bands(self) -> list[str]:
        return sort_bands(self.instances[0].bands) if self.instances else []

    def to_dict(self) -> dict:
        return {"patch_id": self.patch_id, "hr_shape": list(self.hr_shape),
                "instances": [{"dx": i.dx, "dy": i.dy,
                               "bands": {b: asdict(p) for b, p in i.bands.items()}}
                              for i in self.instances]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DegradationRecord":
        inst = [TemporalInstance(float(i["dx"]), float(i["dy"]),
                                 {canonical(b): BandDegradation(**p) for b, p in i["bands"].items()})
                for i in d["instances"]]
        return cls(str(d["patch_id"]), tuple(int(v) for v in d["hr_shape"]), inst)


def _stream(seed: int, patch_id: str, t: int, slot: int) -> np.random.Generator:
    key = [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(patch_id.encode("utf-8")), t, slot]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _check_patch(hr_patch: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], tuple[int, int]]:
    if not hr_patch:
        raise DegradationError("empty HR patch")
    patch = {canonical(b): np.asarray(v, dtype=np.float32) for b, v in hr_patch.items()}
    shapes = {v.shape for v in patch.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise DegradationError(f"HR bands must share one 2-D grid, got {shapes}")
    shape = next(iter(shapes))
    if shape[0] % HR_MULTIPLE or shape[1] % HR_MULTIPLE:
        raise DegradationError(f"HR patch {shape[0]}x{shape[1]} is not divisible by {HR_MULTIPLE}")
    return patch, shape


def sample_record(hr_shape: tuple[int, int], bands: Iterable[str], params: DegradationParams,
                  patch_id: str = "patch") -> DegradationRecord:
    """Draw the degradation parameters for one patch."""
    bands = sort_bands(bands)
    instances = []
    for t in range(params.n_lr_images):
        rng = _stream(params.seed, patch_id, t, 0)
        dx, dy = rng.uniform(-params.shift_range, params.shift_range, size=2)
        per_band = {}
        for b in bands:
            r = _stream(params.seed, patch_id, t, 1 + BANDS.index(b))
            per_band[b] = BandDegradation(
                contrast=float(r.uniform(*params.contrast_range)),
                brightness=float(r.uniform(*params.brightness_range)),
                blur_sigma=float(r.uniform(*params.blur_sigma_range)),
                noise_sigma=float(r.uniform(*params.noise_sigma_range)),
                noise_seed=int(r.integers(0, 2**63 - 1)),
            )
        instances.append(TemporalInstance(float(dx), float(dy), per_band))
    return DegradationRecord(patch_id, tuple(hr_shape), instances)


def degrade_band(hr: np.ndarray, band: str, dx: float, dy: float, p: BandDegradation) -> np.ndarray:
    """One band of one LR instance: shift, intensity, blur, noise, then downsample."""
    x = resample.translate(hr, dx, dy)
    x = x * p.contrast + p.brightness
    x = resample.gaussian_blur(x, p.blur_sigma)
    if p.noise_sigma > 0:
        noise = np.random.Generator(np.random.Philox(p.noise_seed)).standard_normal(x.shape)
        x = x + p.noise_sigma * noise
    return resample.downsample(x, group_of(band).upscale_to_output).astype(np.float32)


def replay(hr_patch: Mapping[str, np.ndarray], record: DegradationRecord) -> SceneStack:
    """Regenerate the LR stack described by ``record``."""
    patch, shape = _check_patch(hr_patch)
    if tuple(record.hr_shape) != shape:
        raise DegradationError(f"record is for {record.hr_shape}, patch is {shape}")
    if not record.instances:
        raise DegradationError("record has no temporal instances")
    for i, inst in enumerate(record.instances):
        if set(inst.bands) != set(patch):
            raise DegradationError(
                f"instance {i}: record bands {sort_bands(inst.bands)} != patch bands {sort_bands(patch)}")
    series = {}
    for b in sort_bands(patch):
        imgs = [degrade_band(patch[b], b, inst.dx, inst.dy, inst.bands[b]) for inst in record.instances]
        series[b] = BandSeries(b, np.stack(imgs))
    return SceneStack(series, scene_id=record.patch_id)


def simulate_lr_stack(hr_patch: Mapping[str, np.ndarray], params: DegradationParams,
                      patch_id: str = "patch") -> tuple[SceneStack, DegradationRecord]:
    """Simulate ``params.n_lr_images`` LR acquisitions of an HR patch."""
    patch, shape = _check_patch(hr_patch)
    record = sample_record(shape, patch, params, patch_id)
    return replay(patch, record), record


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SplitSpec:
    """Train/val/test fractions; patches are whole non-overlapping tiles."""

    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DegradationError(f"split fractions must be >= 0 and sum to 1, got {fr}")

    def counts(self, n: int) -> dict[str, int]:
        """Round to nearest, then keep at least one patch in every nonzero split."""
        names = ("train", "val", "test")
        fr = dict(zip(names, (self.train, self.val, self.test)))
        c = {k: int(np.floor(f * n + 0.5)) for k, f in fr.items()}
        for k in names:
            if fr[k] > 0 and c[k] == 0 and n >= sum(1 for f in fr.values() if f > 0):
                c[k] = 1
        while sum(c.values()) > n:
            k = max(names, key=lambda s: (c[s], fr[s]))
            c[k] -= 1
        while sum(c.values()) < n:
            k = max(names, key=lambda s: (fr[s] * n - c[s], fr[s]))
            c[k] += 1
        return c


@dataclass
class PatchEntry:
    patch_id: str
    scene_id: str
    row: int
    col: int
    size: int
    split: str
    lr: str
    hr: str
    record: dict

    def footprint(self) -> tuple[int, int, int, int]:
        return self.row, self.col, self.row + self.size, self.col + self.size


def tile_origins(height: int, width: int, patch_size: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(0, height - patch_size + 1, patch_size)
            for c in range(0, width - patch_size + 1, patch_size)]


def build_dataset(hr_scenes: Mapping[str, Mapping[str, np.ndarray]], patch_size: int,
                  split: SplitSpec, params: DegradationParams, out_dir) -> dict:
    """Tile HR scenes, assign splits, simulate LR stacks and write everything to ``out_dir``.

    ``hr_scenes`` maps a scene id to ``{band: (H, W) array}`` on one common grid.
    Returns the dataset manifest (also written to ``out_dir/dataset.json``).
    """
    if patch_size % HR_MULTIPLE:
        raise DegradationError(f"patch_size {patch_size} is not divisible by {HR_MULTIPLE}")
    out_dir = Path(out_dir)
    tiles = []
    for scene_id in sorted(hr_scenes):
        scene = {canonical(b): np.asarray(v, np.float32) for b, v in hr_scenes[scene_id].items()}
        h, w = next(iter(scene.values())).shape
        if h < patch_size or w < patch_size:
            raise DegradationError(f"scene {scene_id} ({h}x{w}) is smaller than one {patch_size} patch")
        for r, c in tile_origins(h, w, patch_size):
            tiles.append((scene_id, r, c, {b: v[r:r + patch_size, c:c + patch_size] for b, v in scene.items()}))

    counts = split.counts(len(tiles))
    order = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.seed, 0x5917]))).permutation(len(tiles))
    assignment = {}
    pos = 0
    for name in ("train", "val", "test"):
        for k in order[pos:pos + counts[name]]:
            assignment[int(k)] = name
        pos += counts[name]

    entries = []
    for k, (scene_id, r, c, patch) in enumerate(tiles):
        pid = f"{scene_id}_r{r:05d}_c{c:05d}"
        lr, record = simulate_lr_stack(patch, params, pid)
        lr.degradation_ref = "record"
        base = Path("patches") / pid
        save_scene(lr, out_dir / base / "lr")
        hr = SceneStack({b: BandSeries(b, v[None]) for b, v in patch.items()}, pid, "uniform")
        save_scene(hr, out_dir / base / "hr")
        entries.append(PatchEntry(pid, scene_id, r, c, patch_size, assignment[k],
                                  str(base / "lr"), str(base / "hr"), record.to_dict()))

    manifest = {
        "version": 1,
        "patch_size": patch_size,
        "split": asdict(split),
        "params": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(params).items()},
        "splits": {s: [e.patch_id for e in entries if e.split == s] for s in ("train", "val", "test")},
        "patches": [asdict(e) for e in entries],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest


class Dataset:
    """Read access to a dataset written by :func:`build_dataset`."""

    def __init__(self, path):
        path = Path(path)
        self.manifest_path = path / DATASET_MANIFEST if path.is_dir() else path
        if not self.manifest_path.is_file():
            raise FileNotFoundError(f"{self.manifest_path}: dataset manifest not found")
        self.root = self.manifest_path.parent
        self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        self.entries = [PatchEntry(**p) for p in self.manifest["patches"]]

    def split(self, name: str) -> list[PatchEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: PatchEntry) -> tuple[SceneStack, SceneStack]:
        return load_scene(self.root / entry.lr), load_scene(self.root / entry.hr)

    def iter_split(self, name: str) -> Iterator[tuple[PatchEntry, SceneStack, SceneStack]]:
        for e in self.split(name):
            lr, hr = self.load(e)
            yield e, lr, hr


def hr_patch_of(stack: SceneStack) -> dict[str, np.ndarray]:
    """``{band: (H, W)}`` view of a uniform single-image scene."""
    return {b: s.images[0] for b, s in stack.series.items()}
