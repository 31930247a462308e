"""Value-range conversions and the resamplers shared by training and inference.

Rasters are channels-last float arrays in [0, 1] unless stated otherwise.
Continuous image coordinates put the centre of pixel ``k`` at ``k + 0.5``.
"""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np


class RasterSource(Protocol):
    """Anything that can hand back a float [0, 1] RGB block, white outside bounds."""

    width: int
    height: int

    def read(self, x: int, y: int, w: int, h: int) -> np.ndarray: ...


def to_model(u: np.ndarray) -> np.ndarray:
    """Map storage range [0, 1] to the internal range [-1, 1]."""
    return u * 2.0 - 1.0


def from_model(t: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map back to [0, 1]."""
    return (np.clip(t, -1.0, 1.0) + 1.0) * 0.5


def quantize(u: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(u, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(b: np.ndarray, dtype=np.float32) -> np.ndarray:
    return b.astype(dtype) / dtype(255.0)


def _interp_matrix(positions: np.ndarray, n: int) -> np.ndarray:
    """Dense linear-interpolation weights for sample ``positions`` (index space).

    Positions outside ``[0, n-1]`` clamp to the edge sample.
    """
    pos = np.clip(positions, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n - 2) if n > 1 else np.zeros_like(i0)
    frac = pos - i0
    m = np.zeros((positions.size, n), dtype=np.float64)
    rows = np.arange(positions.size)
    if n == 1:
        m[:, 0] = 1.0
        return m
    m[rows, i0] += 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def sample_grid(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``arr`` (H, W, C) at continuous coordinates.

    ``xs``/``ys`` are continuous positions (pixel centres at k+0.5); the result
    has shape (len(ys), len(xs), C).  Out-of-range samples clamp to the edge.
    """
    h, w = arr.shape[:2]
    my = _interp_matrix(np.asarray(ys, np.float64) - 0.5, h)
    mx = _interp_matrix(np.asarray(xs, np.float64) - 0.5, w)
    out = np.einsum("ah,hwc,bw->abc", my, arr.astype(np.float64), mx, optimize=True)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Half-pixel-centred bilinear resize of (H, W, C) or (N, H, W, C)."""
    out_w = out_h if out_w is None else out_w
    if arr.ndim == 4:
        return np.stack([resize_bilinear(a, out_h, out_w) for a in arr])
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    xs = (np.arange(out_w) + 0.5) * (w / out_w)
    ys = (np.arange(out_h) + 0.5) * (h / out_h)
    return sample_grid(arr, xs, ys)


def box_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor``×``factor`` blocks of (..., H, W, C)."""
    if factor == 1:
        return arr.copy()
    *lead, h, w, c = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"size {h}x{w} not divisible by {factor}")
    r = arr.reshape(*lead, h // factor, factor, w // factor, factor, c)
    return r.mean(axis=(-4, -2))


def resample_rect(
    source: RasterSource,
    x: float,
    y: float,
    w: float,
    h: float,
    out_w: int,
    out_h: int | None = None,
) -> np.ndarray:
    """Bilinearly resample the real-valued rectangle (x, y, w, h) of ``source``.

    Output pixel ``u`` samples the source at ``x + (u + 0.5) * w / out_w``.
    The source fills anything outside its bounds with white, so a rectangle
    hanging over the border picks up a white margin.
    """
    out_h = out_w if out_h is None else out_h
    xs = x + (np.arange(out_w) + 0.5) * (w / out_w)
    ys = y + (np.arange(out_h) + 0.5) * (h / out_h)
    # integer block covering every bilinear neighbour
    x0 = math.floor(xs[0] - 0.5)
    y0 = math.floor(ys[0] - 0.5)
    x1 = math.floor(xs[-1] - 0.5) + 2
    y1 = math.floor(ys[-1] - 0.5) + 2
    block = source.read(x0, y0, x1 - x0, y1 - y0)
    return sample_grid(block.astype(np.float64), xs - x0, ys - y0)


class ArraySource:
    """In-memory :class:`RasterSource` over a float (H, W, 3) array."""

    def __init__(self, arr: np.ndarray):
        self.arr = np.asarray(arr, dtype=np.float64)
        self.height, self.width = self.arr.shape[:2]

    def read(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        out = np.ones((h, w, self.arr.shape[2]), dtype=np.float64)
        sx0, sy0 = max(x, 0), max(y, 0)
        sx1, sy1 = min(x + w, self.width), min(y + h, self.height)
        if sx0 < sx1 and sy0 < sy1:
            out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = self.arr[sy0:sy1, sx0:sx1]
        return out
