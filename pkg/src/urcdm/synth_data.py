"""Procedural multi-scale "pseudo-tissue" scenes and per-stage training pairs.

A scene is an analytic function of canvas position (full-resolution pixel
units), so any region can be rendered at any zoom without rendering the
whole image.  Detail finer than about two output pixels is faded to its
local mean, which keeps renders at different zooms consistent with one
another after box downsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .cascade.config import STAGES_PER_CDM, CascadeConfig
from .cascade.geometry import PatchTask, conditioning_crop, is_white_patch, plan_level, stage_cond
from .resample import box_downsample, quantize, resize_bilinear
from .tile_store import TiledImage

_M1 = np.uint32(0x7FEB352D)
_M2 = np.uint32(0x846CA68B)
_PX = np.uint32(0x9E3779B1)
_PY = np.uint32(0x85EBCA77)

TISSUE_LIGHT = np.array([0.94, 0.66, 0.80])
TISSUE_DARK = np.array([0.78, 0.42, 0.62])
NUCLEUS = np.array([0.34, 0.20, 0.50])
GLAND_FILL = np.array([0.97, 0.80, 0.88])
GLAND_RING = np.array([0.60, 0.30, 0.52])
BACKGROUND = 0.975

NUCLEUS_CELL = 24.0  # canvas px per jitter cell
NUCLEUS_RADIUS = (3.0, 6.0)
GLAND_CELL = 192.0
GLAND_RADIUS = (40.0, 72.0)
VOID_COVERAGE_GAIN = 1.9


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: int = 2304
    blob_density: float = 0.55  # probability that a nucleus cell is occupied
    texture_octaves: int = 7
    white_fraction_target: float = 0.3


def _hash(ix, iy, seed: int, salt: int) -> np.ndarray:
    """Integer lattice hash -> float in [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint32) * _PX ^ iy.astype(np.uint32) * _PY
        h ^= np.uint32((seed * 0x27D4EB2F + salt * 0x165667B1) & 0xFFFFFFFF)
        h ^= h >> np.uint32(16)
        h *= _M1
        h ^= h >> np.uint32(15)
        h *= _M2
        h ^= h >> np.uint32(16)
    return h.astype(np.float64) / 4294967296.0


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _lattice(ix0: int, iy0: int, nx: int, ny: int, seed: int, salt: int) -> np.ndarray:
    ix = np.arange(ix0, ix0 + nx, dtype=np.int64)[None, :]
    iy = np.arange(iy0, iy0 + ny, dtype=np.int64)[:, None]
    return _hash(*np.broadcast_arrays(ix, iy), seed, salt)


def _value_noise(xs, ys, cell: float, seed: int, salt: int) -> np.ndarray:
    """Smooth lattice noise on the separable grid ``ys`` x ``xs`` (canvas units)."""
    gx, gy = xs / cell, ys / cell
    ix, iy = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = _fade(gx - ix)[None, :], _fade(gy - iy)[:, None]
    x0, y0 = int(ix.min()), int(iy.min())
    lat = _lattice(x0, y0, int(ix.max()) - x0 + 2, int(iy.max()) - y0 + 2, seed, salt)
    cx, cy = ix - x0, iy - y0
    v00 = lat[np.ix_(cy, cx)]
    v10 = lat[np.ix_(cy, cx + 1)]
    v01 = lat[np.ix_(cy + 1, cx)]
    v11 = lat[np.ix_(cy + 1, cx + 1)]
    top = v00 + fx * (v10 - v00)
    bot = v01 + fx * (v11 - v01)
    return top + fy * (bot - top)


def _band_weight(feature: float, pixel: float, lo: float = 2.0, hi: float = 4.0) -> float:
    """1 when ``feature`` spans >= ``hi`` pixels, 0 below ``lo``, linear between."""
    r = feature / pixel
    return float(np.clip((r - lo) / (hi - lo), 0.0, 1.0))


def _fbm(xs, ys, base_cell: float, octaves: int, pixel: float, seed: int, salt: int) -> np.ndarray:
    total = np.zeros((ys.size, xs.size))
    amp, norm, cell = 1.0, 0.0, base_cell
    for o in range(octaves):
        w = _band_weight(cell, pixel)
        if w > 0:
            total += amp * (w * _value_noise(xs, ys, cell, seed, salt + o) + (1 - w) * 0.5)
        else:
            total += amp * 0.5
        norm += amp
        amp *= 0.5
        cell /= 2.0
    return total / norm


def _ellipse_field(xs, ys, cell, radius, density, pixel, seed, salt):
    """Soft coverage of jittered elliptical blobs (one candidate per cell).

    Returns (coverage, ring) arrays; ``ring`` peaks on blob boundaries.
    """
    ix, iy = np.floor(xs / cell).astype(np.int64), np.floor(ys / cell).astype(np.int64)
    x0, y0 = int(ix.min()) - 1, int(iy.min()) - 1
    nx, ny = int(ix.max()) - x0 + 2, int(iy.max()) - y0 + 2
    gx = np.arange(x0, x0 + nx)[None, :]
    gy = np.arange(y0, y0 + ny)[:, None]
    present = _lattice(x0, y0, nx, ny, seed, salt) < density
    ox = (gx + 0.15 + 0.7 * _lattice(x0, y0, nx, ny, seed, salt + 1)) * cell
    oy = (gy + 0.15 + 0.7 * _lattice(x0, y0, nx, ny, seed, salt + 2)) * cell
    r = radius[0] + (radius[1] - radius[0]) * _lattice(x0, y0, nx, ny, seed, salt + 3)
    ratio = 0.6 + 0.4 * _lattice(x0, y0, nx, ny, seed, salt + 4)
    ang = math.pi * _lattice(x0, y0, nx, ny, seed, salt + 5)
    ca, sa = np.cos(ang), np.sin(ang)
    cover = np.zeros((ys.size, xs.size))
    ring = np.zeros_like(cover)
    X, Y = xs[None, :], ys[:, None]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            sel = np.ix_(iy - y0 + dy, ix - x0 + dx)
            if not present[sel[0].min() : sel[0].max() + 1, sel[1].min() : sel[1].max() + 1].any():
                continue
            u, v = X - ox[sel], Y - oy[sel]
            rr, c_, s_ = r[sel], ca[sel], sa[sel]
            a = (u * c_ + v * s_) / rr
            b = (-u * s_ + v * c_) / (rr * ratio[sel])
            d = np.sqrt(a * a + b * b)
            edge = max(pixel, 1.5) / rr
            pres = present[sel]
            c = pres / (1.0 + np.exp(np.clip(-(1.0 - d) / edge, -60, 60)))
            np.maximum(cover, c, out=cover)
            rw = np.maximum(0.12, edge)
            np.maximum(ring, pres * np.exp(-np.minimum(((d - 1.0) / rw) ** 2, 60.0)), out=ring)
    return cover, ring


def _voids(spec: SceneSpec):
    """Deterministic super-ellipse parameters for the white regions."""
    rng = np.random.default_rng([spec.seed, 0x5117E])
    f = spec.white_fraction_target
    if f <= 0:
        return []
    c = spec.canvas
    mean_area = 0.0
    n_probe = 64
    probe = []
    for _ in range(n_probe):
        a, b = rng.uniform(0.10, 0.24, 2) * c
        p = rng.uniform(2.5, 4.0)
        probe.append((a, b, p))
        mean_area += 4 * a * b * math.gamma(1 + 1 / p) ** 2 / math.gamma(1 + 2 / p)
    mean_area /= n_probe
    # boolean-model coverage 1 - exp(-n A / C^2); the factor compensates for
    # border clipping and the soft, wobbly outline
    n = max(1, round(-math.log(1 - f) * c * c / mean_area * VOID_COVERAGE_GAIN))
    out = []
    for k in range(n):
        a, b, p = probe[k % n_probe]
        x, y = rng.uniform(-0.05, 1.05, 2) * c
        ang = rng.uniform(0, math.pi)
        out.append((x, y, a, b, p, ang))
    return out


def _void_field(xs, ys, voids, pixel, seed):
    field = np.zeros((ys.size, xs.size))
    if not voids:
        return field
    wobble = None
    X, Y = xs[None, :], ys[:, None]
    for x, y, a, b, p, ang in voids:
        reach = 1.6 * max(a, b)
        if xs[-1] < x - reach or xs[0] > x + reach or ys[-1] < y - reach or ys[0] > y + reach:
            continue
        if wobble is None:
            wobble = _fbm(xs, ys, 160.0, 3, pixel, seed, 900) - 0.5
        ca, sa = math.cos(ang), math.sin(ang)
        u, v = X - x, Y - y
        s = np.abs(u * ca + v * sa) / a
        t = np.abs(-u * sa + v * ca) / b
        d = (s**p + t**p) ** (1.0 / p) + 0.35 * wobble
        edge = max(pixel, 6.0) / min(a, b)
        np.maximum(field, 1.0 / (1.0 + np.exp(np.clip(-(1.0 - d) / edge, -60, 60))), out=field)
    return field


class SceneRenderer:
    """Renders one :class:`SceneSpec` at arbitrary zoom; caches the void layout."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.voids = _voids(spec)

    def render(self, level_zoom: float, region: tuple[int, int, int, int]) -> np.ndarray:
        x, y, w, h = region
        spec = self.spec
        limit = math.ceil(spec.canvas * level_zoom - 1e-9)
        if x < 0 or y < 0 or x + w > limit or y + h > limit:
            raise ValueError(f"region {region} outside canvas {limit}x{limit} at zoom {level_zoom}")
        pixel = 1.0 / level_zoom
        px = (x + np.arange(w) + 0.5) * pixel
        py = (y + np.arange(h) + 0.5) * pixel
        s = spec.seed

        tone = _fbm(px, py, spec.canvas / 4, spec.texture_octaves, pixel, s, 10)
        tone = np.clip((tone - 0.5) * 2.2 + 0.5, 0, 1)[..., None]
        color = TISSUE_LIGHT + (TISSUE_DARK - TISSUE_LIGHT) * tone

        g_cov, g_ring = _ellipse_field(px, py, GLAND_CELL, GLAND_RADIUS, 0.45, pixel, s, 100)
        wg = _band_weight(GLAND_RADIUS[0], pixel, 1.0, 3.0)
        color = color + (GLAND_FILL - color) * (wg * g_cov * (1 - g_ring))[..., None]
        color = color + (GLAND_RING - color) * (wg * 0.8 * g_ring)[..., None]
        # sub-pixel glands fade to their mean tint
        color = color + (GLAND_FILL - color) * ((1 - wg) * 0.12)

        n_cov, _ = _ellipse_field(px, py, NUCLEUS_CELL, NUCLEUS_RADIUS, spec.blob_density, pixel, s, 200)
        r_mean = sum(NUCLEUS_RADIUS) / 2
        wn = _band_weight(r_mean, pixel, 0.6, 1.6)
        mean_cov = spec.blob_density * math.pi * r_mean**2 * 0.8 / NUCLEUS_CELL**2
        nuc = (wn * n_cov + (1 - wn) * mean_cov) * (1 - 0.7 * g_cov * wg)
        color = color + (NUCLEUS - color) * (0.9 * nuc)[..., None]

        void = _void_field(px, py, self.voids, pixel, s)[..., None]
        grain = _fbm(px, py, 64.0, 3, pixel, s, 300)[..., None]
        white = BACKGROUND - 0.03 * grain
        out = color + (white - color) * void
        return np.clip(out, 0.0, 1.0)


def render_scene(spec: SceneSpec, level_zoom: float, region: tuple[int, int, int, int]) -> np.ndarray:
    """Render ``region`` (x, y, w, h in pixels at ``level_zoom``) as float RGB in [0, 1]."""
    return SceneRenderer(spec).render(level_zoom, region)


def white_fraction(raster: np.ndarray, pixel_level: float = 0.9) -> float:
    return float((np.asarray(raster).min(axis=-1) >= pixel_level).mean())


class SceneLevel:
    """RasterSource over one pyramid level of a procedural scene."""

    def __init__(self, renderer: SceneRenderer, side: int):
        self.renderer = renderer
        self.width = self.height = side
        self.zoom = side / renderer.spec.canvas

    def read(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        out = np.ones((h, w, 3))
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, self.width), min(y + h, self.height)
        if x0 < x1 and y0 < y1:
            out[y0 - y : y1 - y, x0 - x : x1 - x] = self.renderer.render(self.zoom, (x0, y0, x1 - x0, y1 - y0))
        return out


class ProceduralPyramid:
    """A scene viewed at the cascade's level sides."""

    def __init__(self, spec: SceneSpec, sides: list[int]):
        self.renderer = SceneRenderer(spec)
        self.levels = [SceneLevel(self.renderer, s) for s in sides]

    def level(self, i: int):
        return self.levels[i]


class StoredPyramid:
    def __init__(self, img: TiledImage):
        self.img = img

    def level(self, i: int):
        return self.img.level_reader(i)


def _pyramid(item, sides):
    if isinstance(item, SceneSpec):
        return ProceduralPyramid(item, sides)
    if isinstance(item, TiledImage):
        return StoredPyramid(item)
    return item


@dataclass
class TrainPair:
    stage_id: int
    target: np.ndarray
    cond: np.ndarray | None


def stage_pair(
    pyr, cfg: CascadeConfig, stage_id: int, task: PatchTask | None, *, use_crop: bool = True
) -> TrainPair | None:
    """One (target, cond) pair for ``stage_id`` at ``task``'s location.

    Returns None when the location, or the stage's downsampled target, is
    white and the stage is tiled.  With
    ``use_crop=False`` the lower-magnification crop is left out, which gives
    the pairs of an unconditional patch model at that level.
    """
    level, k = divmod(stage_id, STAGES_PER_CDM)
    res = cfg.cdm_levels[level].stage_resolutions
    patch = res[-1]
    if level == 0:
        full = pyr.level(0).read(0, 0, patch, patch)
    else:
        x, y, w, h = task.out_rect
        full = pyr.level(level).read(x, y, w, h)
        if is_white_patch(full, cfg.white_threshold):
            return None
    target = box_downsample(full, patch // res[k])
    if level and is_white_patch(target, cfg.white_threshold):
        # box averaging can lift near-white texture over the pixel level
        return None
    takes_prev, takes_crop = cfg.cond_sources(stage_id)
    prev = box_downsample(full, patch // res[k - 1]) if takes_prev else None
    crop = conditioning_crop(pyr.level(level - 1), task, res[0]) if takes_crop and use_crop else None
    cond = stage_cond(prev, crop)
    return TrainPair(stage_id, target.astype(np.float32), None if cond is None else cond.astype(np.float32))


def make_stage_pairs(
    spec_stream: Iterable,
    cascade_cfg: CascadeConfig,
    stage_id: int,
    count: int | None,
    *,
    per_scene: int = 8,
    seed: int = 0,
    augment: bool = True,
    use_crop: bool = True,
) -> Iterator[TrainPair]:
    """Yield up to ``count`` training pairs for one stage (None = unbounded).

    ``spec_stream`` yields :class:`SceneSpec` (rendered on demand) or stored
    3-level :class:`TiledImage` corpora.  Tiled levels draw ``per_scene``
    random grid positions per scene and drop white targets; the conditioning
    crop is the same :func:`conditioning_crop` used at sampling time.
    Level-0 pairs are augmented with the 8 dihedral transforms.
    """
    if not 0 <= stage_id < cascade_cfg.num_models:
        raise ValueError(f"stage_id must be in 0..{cascade_cfg.num_models - 1}, got {stage_id}")
    level = stage_id // STAGES_PER_CDM
    rng = np.random.default_rng([seed, stage_id])
    plan = plan_level(cascade_cfg, level) if level else None
    made = 0
    for item in spec_stream:
        pyr = _pyramid(item, cascade_cfg.level_sides)
        if level == 0:
            pair = stage_pair(pyr, cascade_cfg, stage_id, None)
            variants = _dihedral(pair) if augment else [pair]
            for p in variants:
                if count is not None and made >= count:
                    return
                yield p
                made += 1
            continue
        picks = rng.integers(0, len(plan.tasks), per_scene)
        for t in picks:
            if count is not None and made >= count:
                return
            pair = stage_pair(pyr, cascade_cfg, stage_id, plan.tasks[int(t)], use_crop=use_crop)
            if pair is None:
                continue
            if augment:
                pair = _dihedral(pair)[int(rng.integers(8))]
            yield pair
            made += 1
        if count is not None and made >= count:
            return


def _dihedral(pair: TrainPair) -> list[TrainPair]:
    out = []
    for flip in (False, True):
        for rot in range(4):

            def tf(a, flip=flip, rot=rot):
                if a is None:
                    return None
                a = a[:, ::-1] if flip else a
                return np.ascontiguousarray(np.rot90(a, rot))

            out.append(TrainPair(pair.stage_id, tf(pair.target), tf(pair.cond)))
    return out


def scene_stream(master_seed: int, spec_template: SceneSpec | None = None) -> Iterator[SceneSpec]:
    """Endless deterministic sequence of scene specs derived from one seed."""
    base = spec_template or SceneSpec(seed=0)
    ss = np.random.SeedSequence(master_seed)
    while True:
        seed = int(ss.spawn(1)[0].generate_state(1)[0])
        yield SceneSpec(seed, base.canvas, base.blob_density, base.texture_octaves, base.white_fraction_target)


def write_scene(spec: SceneSpec, cfg: CascadeConfig, root, *, overwrite: bool = False, band: int = 256) -> TiledImage:
    """Render every cascade level of a scene into a tiled pyramid."""
    sides = cfg.level_sides
    img = TiledImage.create_pyramid(root, [(s, s) for s in sides], cfg.tile_size, overwrite=overwrite)
    pyr = ProceduralPyramid(spec, sides)
    for lvl, side in enumerate(sides):
        for y in range(0, side, band):
            h = min(band, side - y)
            img.write_region(0, y, quantize(pyr.level(lvl).read(0, y, side, h)), lvl)
        img.flush()
    return img
