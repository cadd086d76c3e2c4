"""Separable bicubic resampling, sub-pixel translation and Gaussian blur.

Everything here is computed in float64 through explicit 1-D weight matrices, so a
given input always produces the same output bits on one machine. Borders use
half-sample symmetric reflection (the mirror sits on the outer pixel edge).
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

CUBIC_A = -0.5


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom for ``a = -0.5``)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def fold_index(j: np.ndarray, n: int) -> np.ndarray:
    """Map arbitrary integer indices into ``[0, n)`` by symmetric reflection."""
    j = np.asarray(j, dtype=np.int64)
    period = 2 * n
    j = np.mod(j, period)
    return np.where(j < n, j, period - 1 - j)


def _scatter(rows: np.ndarray, cols: np.ndarray, w: np.ndarray, n_out: int, n_in: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    # np.add.at accumulates in index order, which keeps the result deterministic
    np.add.at(mat, (rows, fold_index(cols, n_in)), w)
    return mat


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """1-D bicubic resize operator of shape ``(n_out, n_in)``.

    Pixel centers are aligned as in ``align_corners=False``. When shrinking with
    ``antialias``, the kernel is stretched by the scale factor; otherwise output
    samples are plain cubic interpolation at the mapped centers. Rows are
    renormalized to unit sum.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("lengths must be positive")
    scale = n_out / n_in
    kscale = min(1.0, scale) if antialias else 1.0
    support = 2.0 / kscale
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    cols = lo[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - cols) * kscale)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.broadcast_to(np.arange(n_out)[:, None], cols.shape)
    mat = _scatter(rows.ravel(), cols.ravel(), w.ravel(), n_out, n_in)
    mat.setflags(write=False)
    return mat


def shift_matrix(n: int, shift: float) -> np.ndarray:
    """1-D operator translating a signal by ``shift`` pixels: ``out[i] = in[i - shift]``."""
    pos = np.arange(n, dtype=np.float64) - shift
    lo = np.floor(pos).astype(np.int64) - 1
    cols = lo[:, None] + np.arange(4)[None, :]
    w = cubic(pos[:, None] - cols)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.broadcast_to(np.arange(n)[:, None], cols.shape)
    return _scatter(rows.ravel(), cols.ravel(), w.ravel(), n, n)


def apply_separable(img: np.ndarray, rows_op: np.ndarray, cols_op: np.ndarray) -> np.ndarray:
    """``rows_op @ img @ cols_op.T`` in float64 for a 2-D image (or a stack of them)."""
    img = np.asarray(img, dtype=np.float64)
    return np.matmul(np.matmul(rows_op, img), cols_op.T)


def resize(img: np.ndarray, out_shape: tuple[int, int], antialias: bool = True) -> np.ndarray:
    """Bicubic resize of the last two axes to ``out_shape`` (float64 result)."""
    h, w = img.shape[-2:]
    return apply_separable(img, resize_matrix(h, out_shape[0], antialias),
                           resize_matrix(w, out_shape[1], antialias))


def upsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return resize(img, (h * factor, w * factor))


def downsample(img: np.ndarray, factor: int, antialias: bool = True) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor}")
    return resize(img, (h // factor, w // factor), antialias)


def translate(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift content right by ``dx`` and down by ``dy`` pixels with bicubic interpolation."""
    h, w = img.shape[-2:]
    if dx == 0.0 and dy == 0.0:
        return np.asarray(img, dtype=np.float64).copy()
    return apply_separable(img, shift_matrix(h, dy), shift_matrix(w, dx))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma)) if sigma > 0 else 0
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric borders; ``sigma = 0`` is the identity."""
    img = np.asarray(img, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    if r == 0:
        return img.copy()
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        # fixed tap order
        for t, wt in enumerate(k):
            acc += wt * np.take(padded, np.arange(t, t + n), axis=axis)
        out = acc
    return out
