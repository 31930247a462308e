"""Level-by-level generation: CDM chains, patch stitching and the outpainting baseline."""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..diffusion import NoiseSchedule, sample, sample_constrained
from ..resample import box_downsample, dequantize, quantize, resize_bilinear
from ..tile_store import TiledImage
from .config import STAGES_PER_CDM, CascadeConfig
from .geometry import (
    PatchTask,
    conditioning_crop,
    is_white_patch,
    plan_level,
    stage_cond,
    substitute_white,
    upscale_footprint,
)
from .scheduler import TraceEntry, run_dag

log = logging.getLogger(__name__)


class CallCounter:
    """Thread-safe tally of stage sampler invocations per level."""

    def __init__(self):
        self._lock = threading.Lock()
        self.by_level: Counter = Counter()

    def add(self, level: int) -> None:
        with self._lock:
            self.by_level[level] += 1

    @property
    def total(self) -> int:
        return sum(self.by_level.values())


class CoverageTracker:
    """Shadow write-count map per level.

    ``record`` is called for every committed write; ``require`` raises if a
    task is about to read constraint pixels nobody has written yet.
    """

    def __init__(self, sides: Sequence[int]):
        self.counts = [np.zeros((s, s), np.uint16) for s in sides]

    def record(self, level: int, rect) -> None:
        x, y, w, h = rect
        self.counts[level][y : y + h, x : x + w] += 1

    def require(self, level: int, task: PatchTask) -> None:
        x, y, w, h = task.out_rect
        seen = self.counts[level][y : y + h, x : x + w][task.known_mask]
        if seen.size and seen.min() == 0:
            raise RuntimeError(f"task {task.grid_pos} at level {level} reads unwritten constraint pixels")

    def exactly_once(self, level: int) -> bool:
        c = self.counts[level]
        return bool(c.min() == 1 and c.max() == 1)


def task_seed(seed: int, level: int, i: int, j: int) -> list[int]:
    """Entropy for one task; independent of scheduling order and pool size."""
    return [int(seed), level, i, j]


NOISE_BLOCK = 16
_NOISE_OFFSET = 1 << 24


def world_noise(key: Sequence[int], x: int, y: int, side: int, *, block: int = NOISE_BLOCK, dtype=np.float32) -> np.ndarray:
    """Window (side, side, 3) at integer (x, y) of an unbounded Gaussian field.

    The field is built from ``block``-sized cells, each seeded by ``key`` and
    its cell index, so overlapping windows agree wherever they overlap.
    """
    bx0, by0 = x // block, y // block
    bx1, by1 = (x + side - 1) // block, (y + side - 1) // block
    rows = []
    for by in range(by0, by1 + 1):
        row = [
            np.random.default_rng([*map(int, key), by + _NOISE_OFFSET, bx + _NOISE_OFFSET]).standard_normal((block, block, 3))
            for bx in range(bx0, bx1 + 1)
        ]
        rows.append(np.concatenate(row, axis=1))
    field = np.concatenate(rows, axis=0)
    ox, oy = x - bx0 * block, y - by0 * block
    return field[oy : oy + side, ox : ox + side].astype(dtype)


def _downsample_constraints(known, mask, factor):
    if factor == 1:
        return known, mask
    k = box_downsample(known, factor)
    m = box_downsample(mask[..., None].astype(np.float64), factor)[..., 0] > 1 - 1e-9
    return k, m


def run_cdm(
    models: Sequence,
    cond: np.ndarray | None,
    schedule: NoiseSchedule,
    seed,
    *,
    resolutions: Sequence[int],
    external_cond_stages: Sequence[int] = (0,),
    known: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    counter: CallCounter | None = None,
    level: int = 0,
    margin: int = 0,
    eta: float = 0.0,
    noise_key: Sequence[int] | None = None,
    origin: tuple[int, int] = (0, 0),
    dtype=np.float32,
) -> np.ndarray:
    """Sample one CDM chain (base then two super-resolution stages).

    ``cond`` is the lower-magnification crop, handed to the stages listed in
    ``external_cond_stages``; every later stage also sees the previous
    stage's output.  ``known``/``mask`` (at the final resolution) pin pixels:
    each stage is constrained against their box-downsampled version, and
    the final output matches ``known`` exactly under ``mask``.
    With ``margin`` > 0 every stage samples a canvas widened by the margin
    (final-stage pixels, scaled per stage) and ``cond`` must cover it; the
    margin is cropped off at the end, so patch edges never carry the
    network's border effects.
    With ``noise_key`` each stage starts from a window of a shared noise
    field placed at ``origin`` (final-stage pixels of the patch corner), so
    neighbouring patches start from identical noise where they overlap
    (exactly when the origin scales to whole pixels at a stage, otherwise
    up to a sub-pixel shift of the coarse stage's window).
    Returns an (R, R, 3) float image in [0, 1], R = ``resolutions[-1]``.
    """
    if len(models) != STAGES_PER_CDM or any(m is None for m in models):
        missing = [k for k in range(STAGES_PER_CDM) if k >= len(models) or models[k] is None]
        raise ValueError(f"missing model for stage(s) {missing} of level {level}")
    res = list(resolutions)
    if len(res) != STAGES_PER_CDM or any(b <= a for a, b in zip(res, res[1:])):
        raise ValueError(f"stage resolutions {res} must be 3 strictly increasing sizes")
    if any(res[-1] % r for r in res):
        raise ValueError(f"stage resolutions {res} do not divide the output size {res[-1]}")
    if known is not None and known.shape[:2] != (res[-1], res[-1]):
        raise ValueError(f"known has shape {known.shape[:2]}, expected {res[-1]}x{res[-1]}")
    final = res[-1]
    if margin < 0 or any(margin * r % final for r in res):
        raise ValueError(f"margin {margin} does not scale to stage resolutions {res}")
    if margin:
        res = [r + 2 * margin * r // final for r in res]
        if known is not None and mask is not None:
            pad = ((margin, margin), (margin, margin))
            known = np.pad(known, pad + ((0, 0),), constant_values=1.0)
            mask = np.pad(mask, pad, constant_values=False)
    prev = None
    for k, model in enumerate(models):
        crop = cond if (cond is not None and k in external_cond_stages) else None
        c = stage_cond(prev, crop)
        if c is not None and c.shape[0] != res[k]:
            c = resize_bilinear(c, res[k])
        shape = (1, res[k], res[k], 3)
        rng = list(seed) + [k] if isinstance(seed, (list, tuple)) else [int(seed), k]
        cb = None if c is None else c[None]
        noise = None
        if noise_key is not None:
            r = resolutions[k]
            ox, oy = (o * r // final - margin * r // final for o in origin)
            noise = world_noise([*noise_key, k], ox, oy, res[k], dtype=dtype)[None]
        if counter is not None:
            counter.add(level)
        if known is not None and mask is not None and mask.any():
            kk, mm = _downsample_constraints(known, mask, res[-1] // res[k])
            out = sample_constrained(model, schedule, cb, kk[None], mm, rng, eta=eta, init_noise=noise, dtype=dtype)
        else:
            out = sample(model, schedule, cb, shape, rng, eta=eta, init_noise=noise, dtype=dtype)
        prev = out[0]
    return prev[margin : margin + final, margin : margin + final]


def _progress_record(level, pos, white, info):
    return {
        "level": level,
        "i": pos[0],
        "j": pos[1],
        "white": bool(white),
        "millis": round(float(info["millis"]), 3),
        "worker": int(info["worker"]),
    }


def run_level(
    store: TiledImage,
    cfg: CascadeConfig,
    level: int,
    models: Sequence,
    schedule: NoiseSchedule,
    seed: int,
    *,
    threads: int = 1,
    use_prev: bool = True,
    progress: Callable[[dict], None] | None = None,
    counter: CallCounter | None = None,
    tracker: CoverageTracker | None = None,
    store_level: int | None = None,
    eta: float = 0.0,
    dtype=np.float32,
) -> list[TraceEntry]:
    """Generate one tiled level into ``store``.

    With ``use_prev`` (the full cascade) each task is conditioned on the
    level below and white footprints are filled by upscaling; without it the
    patches are outpainted from the overlap strips alone.  ``store_level``
    is the pyramid index written to (default ``level``).
    """
    plan = plan_level(cfg, level)
    dst = level if store_level is None else store_level
    res = cfg.cdm_levels[level].stage_resolutions
    ext = tuple(cfg.external_cond_stages) if use_prev else ()
    margin = cfg.context_margin

    def compute(task: PatchTask):
        if use_prev and is_white_patch(upscale_footprint(task, store), cfg.white_threshold):
            task = replace(task, white=True)
            return True, substitute_white(task, store)
        crop = conditioning_crop(store, task, res[0], margin=margin) if use_prev else None
        x, y, w, h = task.out_rect
        mask = task.known_mask
        known = None
        if mask.any():
            if tracker is not None:
                tracker.require(dst, task)
            known = dequantize(store.read_region(x, y, w, h, dst), np.float64)
        i, j = task.grid_pos
        out = run_cdm(
            models,
            crop,
            schedule,
            task_seed(seed, level, i, j),
            resolutions=res,
            external_cond_stages=ext,
            known=known,
            mask=mask if known is not None else None,
            counter=counter,
            level=level,
            margin=margin,
            eta=eta,
            noise_key=(int(seed), level) if cfg.shared_noise else None,
            origin=(x, y),
            dtype=dtype,
        )
        return False, out

    def commit(task: PatchTask, result, info):
        white, patch = result
        x, y, _, _ = task.out_rect
        ox, oy, ow, oh = task.owned_rect
        block = quantize(patch)[oy - y : oy - y + oh, ox - x : ox - x + ow]
        store.write_region(ox, oy, block, dst)
        if tracker is not None:
            tracker.record(dst, task.owned_rect)
        if progress is not None:
            progress(_progress_record(level, task.grid_pos, white, info))

    trace = run_dag(plan, compute, commit, threads=threads)
    store.flush()
    return trace


def _open_output(out, sides, tile_size, overwrite):
    if isinstance(out, TiledImage):
        return out
    return TiledImage.create_pyramid(Path(out), [(s, s) for s in sides], tile_size, overwrite=overwrite)


def run_urcdm(
    models: Sequence,
    cfg: CascadeConfig,
    seed: int,
    out_store,
    *,
    schedule: NoiseSchedule,
    threads: int = 1,
    progress: Callable[[dict], None] | None = None,
    counter: CallCounter | None = None,
    tracker: CoverageTracker | None = None,
    overwrite: bool = False,
    eta: float = 0.0,
    dtype=np.float32,
) -> TiledImage:
    """Generate a full 3-level image with the 9 stage models (``models[stage_id]``).

    ``out_store`` is a path (a new pyramid is created) or an open
    :class:`TiledImage` with the cascade's level sides.  A failing task
    aborts the run; whatever was written so far stays readable.
    """
    if len(models) != cfg.num_models:
        raise ValueError(f"need {cfg.num_models} stage models, got {len(models)}")
    for s, m in enumerate(models):
        if m is None:
            raise ValueError(f"missing model for stage {s}")
    store = _open_output(out_store, cfg.level_sides, cfg.tile_size, overwrite)
    if [lv.width for lv in store.levels] != cfg.level_sides:
        raise ValueError(f"output levels {[lv.width for lv in store.levels]} != config {cfg.level_sides}")
    res0 = cfg.cdm_levels[0].stage_resolutions
    img0 = run_cdm(
        models[:STAGES_PER_CDM], None, schedule, task_seed(seed, 0, 0, 0),
        resolutions=res0, counter=counter, level=0, eta=eta, dtype=dtype,
        noise_key=(int(seed), 0) if cfg.shared_noise else None,
    )
    store.write_region(0, 0, quantize(img0), 0)
    if tracker is not None:
        tracker.record(0, (0, 0, cfg.side(0), cfg.side(0)))
    if progress is not None:
        progress(_progress_record(0, (0, 0), False, {"millis": 0.0, "worker": 0}))
    for level in (1, 2):
        lo = level * STAGES_PER_CDM
        run_level(
            store, cfg, level, models[lo : lo + STAGES_PER_CDM], schedule, seed,
            threads=threads, progress=progress, counter=counter, tracker=tracker, eta=eta, dtype=dtype,
        )
    store.flush()
    return store


def run_outpainting_baseline(
    models: Sequence,
    cfg: CascadeConfig,
    seed: int,
    out_store,
    *,
    schedule: NoiseSchedule,
    level: int = 2,
    threads: int = 1,
    progress: Callable[[dict], None] | None = None,
    counter: CallCounter | None = None,
    overwrite: bool = False,
    eta: float = 0.0,
    dtype=np.float32,
) -> TiledImage:
    """Fill a single-level image of the given level's side by outpainting only.

    Patches follow the same grid and overlap constraints as the cascade but
    see no lower-magnification content, so there is no white skip either.
    """
    side = cfg.side(level)
    if isinstance(out_store, TiledImage):
        store = out_store
    else:
        store = TiledImage.create(Path(out_store), side, side, cfg.tile_size, overwrite=overwrite)
    run_level(
        store, cfg, level, models, schedule, seed,
        threads=threads, use_prev=False, progress=progress, counter=counter, store_level=0, eta=eta, dtype=dtype,
    )
    return store
