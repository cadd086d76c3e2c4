"""Synthetic 12-band HR scenes for toy-scale experiments and tests.

Scenes follow a linear mixing model: a handful of material spectra mixed by
spatial abundance maps made of smooth fields and sharp-edged parcels, so that
bands share spatial structure the way real surface reflectance does.
"""

from __future__ import annotations

import numpy as np

from . import resample
from .bands import BANDS, sort_bands

# rough reflectance profiles over BANDS (B01..B12)
MATERIALS = np.array([
    [0.03, 0.04, 0.07, 0.04, 0.10, 0.30, 0.38, 0.42, 0.44, 0.40, 0.22, 0.11],  # vegetation
    [0.10, 0.13, 0.18, 0.22, 0.25, 0.27, 0.29, 0.31, 0.32, 0.33, 0.40, 0.35],  # bare soil
    [0.06, 0.07, 0.06, 0.04, 0.03, 0.02, 0.02, 0.02, 0.02, 0.01, 0.01, 0.01],  # water
    [0.14, 0.16, 0.18, 0.20, 0.21, 0.21, 0.22, 0.23, 0.23, 0.22, 0.26, 0.24],  # built-up
    [0.05, 0.06, 0.10, 0.12, 0.18, 0.24, 0.27, 0.29, 0.30, 0.28, 0.33, 0.25],  # dry grass
])


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = resample.gaussian_blur(rng.standard_normal((h, w)), sigma)
    return (f - f.mean()) / (f.std() + 1e-12)


def synthetic_scene(height: int, width: int, seed: int = 0, bands=BANDS,
                    n_parcels: int | None = None) -> dict[str, np.ndarray]:
    """Generate one HR scene as ``{band: (height, width) float32 reflectance}``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    k = len(MATERIALS)
    logits = np.stack([2.0 * _smooth_field(rng, height, width, rng.uniform(4.0, 10.0))
                       for _ in range(k)])
    yy, xx = np.mgrid[0:height, 0:width]
    if n_parcels is None:
        n_parcels = max(4, height * width // 600)
    for _ in range(n_parcels):
        m = rng.integers(k)
        ph, pw = rng.integers(3, max(4, height // 4)), rng.integers(3, max(4, width // 4))
        y0, x0 = rng.integers(0, height), rng.integers(0, width)
        if rng.random() < 0.5:
            mask = (yy >= y0) & (yy < y0 + ph) & (xx >= x0) & (xx < x0 + pw)
        else:
            mask = ((yy - y0) / ph) ** 2 + ((xx - x0) / pw) ** 2 < 1.0
        logits[m][mask] += 6.0
    ab = np.exp(logits - logits.max(axis=0, keepdims=True))
    ab /= ab.sum(axis=0, keepdims=True)
    texture = 0.02 * _smooth_field(rng, height, width, 1.0)
    spectra = MATERIALS * rng.uniform(0.9, 1.1, size=MATERIALS.shape)
    out = {}
    for b in sort_bands(bands):
        j = BANDS.index(b)
        refl = np.tensordot(spectra[:, j], ab, axes=1) * (1.0 + texture)
        out[b] = refl.astype(np.float32)
    return out
