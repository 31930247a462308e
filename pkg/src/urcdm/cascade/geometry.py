"""Patch grids, conditioning crops and the white-patch rule."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..resample import RasterSource, resample_rect, resize_bilinear
from ..tile_store import TiledImage
from .config import CascadeConfig, ConfigError, WhiteThreshold


@dataclass(frozen=True)
class PatchTask:
    level: int
    grid_pos: tuple[int, int]  # (row i, col j)
    out_rect: tuple[int, int, int, int]  # x, y, w, h in the level image
    cond_rect: tuple[float, float, float, float]  # in the previous level
    known_top: bool
    known_left: bool
    overlap: int
    white: bool = False

    @property
    def known_mask(self) -> np.ndarray:
        """Pixels of the patch already owned by upper/left neighbours."""
        p = self.out_rect[2]
        m = np.zeros((p, p), dtype=bool)
        if self.known_top:
            m[: self.overlap, :] = True
        if self.known_left:
            m[:, : self.overlap] = True
        return m

    @property
    def owned_rect(self) -> tuple[int, int, int, int]:
        """The part of ``out_rect`` this task writes (patch minus known strips)."""
        x, y, w, h = self.out_rect
        dx = self.overlap if self.known_left else 0
        dy = self.overlap if self.known_top else 0
        return x + dx, y + dy, w - dx, h - dy


@dataclass(frozen=True)
class PatchPlan:
    level: int
    grid_n: int
    patch: int
    stride: int
    side: int
    tasks: tuple[PatchTask, ...]
    dag_edges: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    def task(self, i: int, j: int) -> PatchTask:
        return self.tasks[i * self.grid_n + j]

    def parents(self, i: int, j: int) -> list[tuple[int, int]]:
        return [(a, b) for a, b in ((i - 1, j), (i, j - 1), (i - 1, j - 1)) if a >= 0 and b >= 0]

    def with_tasks(self, tasks) -> "PatchPlan":
        return replace(self, tasks=tuple(tasks))


def plan_level(cfg: CascadeConfig, level: int) -> PatchPlan:
    if level not in (1, 2):
        raise ValueError("only levels 1 and 2 are tiled")
    side, patch, stride = cfg.side(level), cfg.patch(level), cfg.stride(level)
    if (side - patch) % stride:
        raise ConfigError(f"level {level}: non-integer patch grid")
    n = (side - patch) // stride + 1
    zoom = float(cfg.zoom(level))
    cs = patch / zoom
    overlap = patch - stride
    tasks, edges = [], []
    for i in range(n):
        for j in range(n):
            x, y = j * stride, i * stride
            cx, cy = (x + patch / 2) / zoom, (y + patch / 2) / zoom
            tasks.append(
                PatchTask(
                    level=level,
                    grid_pos=(i, j),
                    out_rect=(x, y, patch, patch),
                    cond_rect=(cx - cs / 2, cy - cs / 2, cs, cs),
                    known_top=i > 0,
                    known_left=j > 0,
                    overlap=overlap,
                )
            )
            for p in ((i - 1, j), (i, j - 1), (i - 1, j - 1)):
                if p[0] >= 0 and p[1] >= 0:
                    edges.append((p, (i, j)))
    return PatchPlan(level, n, patch, stride, side, tuple(tasks), tuple(edges))


def _as_source(prev, level: int) -> RasterSource:
    if isinstance(prev, TiledImage):
        return prev.level_reader(level - 1)
    return prev


def conditioning_crop(prev_level_img, task: PatchTask, cond_resolution: int, *, margin: int = 0) -> np.ndarray:
    """Bilinear resample of the task's footprint in the previous level.

    ``prev_level_img`` is a :class:`TiledImage` (its level ``task.level - 1``
    is used) or any raster source; outside-image area comes back white.
    ``margin`` (in patch pixels) widens the footprint on every side; the
    result then has ``cond_resolution`` plus the margin scaled to it.
    """
    x, y, w, h = task.cond_rect
    patch = task.out_rect[2]
    if margin * cond_resolution % patch:
        raise ValueError(f"margin {margin} does not scale to resolution {cond_resolution}")
    s = w / patch
    side = cond_resolution + 2 * margin * cond_resolution // patch
    return resample_rect(
        _as_source(prev_level_img, task.level), x - margin * s, y - margin * s, w + 2 * margin * s, h + 2 * margin * s, side
    )


def is_white_patch(patch: np.ndarray, thr: WhiteThreshold = WhiteThreshold()) -> bool:
    """True iff the share of pixels with min(R,G,B) >= pixel_level exceeds ``thr.fraction``.

    uint8 rasters are compared against ``pixel_level * 255``; float rasters
    are taken to be in [0, 1].
    """
    patch = np.asarray(patch)
    level = thr.pixel_level * 255 if patch.dtype == np.uint8 else thr.pixel_level
    white = patch.min(axis=-1) >= level
    return bool(white.mean() > thr.fraction)


def upscale_footprint(task: PatchTask, prev_level_img) -> np.ndarray:
    x, y, w, h = task.cond_rect
    return resample_rect(_as_source(prev_level_img, task.level), x, y, w, h, task.out_rect[2])


def substitute_white(task: PatchTask, prev_level_img) -> np.ndarray:
    """Output patch for a white task: the footprint upscaled, no model involved."""
    if not task.white:
        raise ValueError(f"task {task.grid_pos} at level {task.level} is not white")
    return upscale_footprint(task, prev_level_img)


def stage_cond(prev: np.ndarray | None, crop: np.ndarray | None) -> np.ndarray | None:
    """Channel-stack a stage's conditioning inputs at the previous stage's size.

    The crop is resized to match ``prev`` when both are present.  Training
    and sampling both go through here, then resize to the stage resolution.
    """
    parts = [a for a in (prev, crop) if a is not None]
    if not parts:
        return None
    if len(parts) == 2 and crop.shape[0] != prev.shape[0]:
        parts[1] = resize_bilinear(crop, prev.shape[0], prev.shape[1])
    return np.concatenate(parts, axis=-1)
