"""Fréchet distance, patch-FID over tiled images, seam statistics and rater tables."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .cascade.config import WhiteThreshold
from .cascade.geometry import PatchPlan, is_white_patch
from .resample import box_downsample, resize_bilinear
from .tile_store import TiledImage

SHRINKAGE = 1e-6


class EvalError(ValueError):
    pass


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def extract(self, raster: np.ndarray) -> np.ndarray: ...


def _as_unit(raster: np.ndarray) -> np.ndarray:
    raster = np.asarray(raster)
    if raster.dtype == np.uint8:
        return raster.astype(np.float64) / 255.0
    return raster.astype(np.float64)


class Hist64:
    """Joint RGB histogram, 4 bins per channel, normalised to sum 1."""

    name = "hist64"
    dim = 64

    def extract(self, raster: np.ndarray) -> np.ndarray:
        u = _as_unit(raster)[..., :3]
        b = np.minimum((u * 4).astype(np.int64), 3)
        idx = (b[..., 0] * 16 + b[..., 1] * 4 + b[..., 2]).ravel()
        return np.bincount(idx, minlength=64) / idx.size


class RandProj512:
    """Fixed random Gaussian projection of a 16x16 RGB thumbnail."""

    name = "randproj512"
    dim = 512

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((16 * 16 * 3, 512)) / np.sqrt(16 * 16 * 3)

    def extract(self, raster: np.ndarray) -> np.ndarray:
        u = _as_unit(raster)[..., :3]
        h = u.shape[0]
        small = box_downsample(u, h // 16) if h % 16 == 0 and u.shape[1] == h else resize_bilinear(u, 16)
        return small.reshape(-1) @ self.proj


EXTRACTORS = {"hist64": Hist64, "randproj512": RandProj512}


def get_extractor(name: str) -> FeatureExtractor:
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise EvalError(f"unknown extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None


@dataclass
class FidReport:
    n_a: int
    n_b: int
    mu_a: np.ndarray
    mu_b: np.ndarray
    trace_term: float
    fid: float
    extras: dict = field(default_factory=dict)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _check_psd(cov: np.ndarray, which: str) -> None:
    w = np.linalg.eigvalsh(cov)
    if w.size and w.min() < -1e-8 * max(1.0, float(np.abs(w).max())):
        raise EvalError(f"covariance {which} is not positive semi-definite (min eigenvalue {w.min():.3g})")


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, n_a: int = 0, n_b: int = 0) -> FidReport:
    """‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½) from Gaussian statistics.

    Tr((ΣaΣb)^½) is evaluated as Tr((Σa^½ Σb Σa^½)^½), whose argument is
    symmetric PSD, through eigendecompositions.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    for x in (mu_a, mu_b, cov_a, cov_b):
        if not np.all(np.isfinite(x)):
            raise EvalError("non-finite statistics")
    _check_psd(cov_a, "a")
    _check_psd(cov_b, "b")
    ra = _sqrtm_psd(cov_a)
    inner = ra @ cov_b @ ra
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(ev, 0, None))))
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    diff = mu_a - mu_b
    fid = float(diff @ diff) + trace_term
    scale = max(1.0, float(np.trace(cov_a) + np.trace(cov_b)))
    if fid < -1e-6 * scale:
        raise EvalError(f"negative Fréchet distance {fid:.3g}")
    return FidReport(n_a, n_b, mu_a, mu_b, trace_term, max(fid, 0.0))


def _stats(feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if not np.all(np.isfinite(feats)):
        raise EvalError("non-finite features")
    n, d = feats.shape
    if n < 2:
        raise EvalError("need at least 2 samples per set")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False).reshape(d, d)
    if n < d + 1:
        cov = cov + SHRINKAGE * np.eye(d)
    return n, mu, cov


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> FidReport:
    """Fréchet distance between Gaussian fits of two (n, dim) feature sets."""
    n_a, mu_a, cov_a = _stats(feats_a)
    n_b, mu_b, cov_b = _stats(feats_b)
    if mu_a.shape != mu_b.shape:
        raise EvalError(f"feature dims differ: {mu_a.size} vs {mu_b.size}")
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b, n_a, n_b)


# -- patch FID ---------------------------------------------------------------


def _reader(img, level):
    if isinstance(img, TiledImage):
        lv = img.levels[-1] if level is None else img.levels[level]
        idx = lv.level_index

        def read(x, y, c):
            return img.read_region(x, y, c, c, idx)

        return lv.width, lv.height, read
    arr = np.asarray(img)
    return arr.shape[1], arr.shape[0], lambda x, y, c: arr[y : y + c, x : x + c]


def sample_crops(images: Sequence, count: int, crop: int, seed, *, level=None, white=WhiteThreshold(), max_draw_factor: int = 20):
    """Uniform random crops (image, x, y) with white crops skipped and redrawn.

    Returns the list of kept rasters and the list of their rectangles.
    """
    readers = [_reader(im, level) for im in images]
    for w, h, _ in readers:
        if crop > min(w, h):
            raise EvalError(f"crop {crop} exceeds image size {w}x{h}")
    rng = np.random.default_rng(seed)
    kept, rects = [], []
    draws = 0
    while len(kept) < count and draws < max_draw_factor * count:
        draws += 1
        k = int(rng.integers(len(readers)))
        w, h, read = readers[k]
        x = int(rng.integers(0, w - crop + 1))
        y = int(rng.integers(0, h - crop + 1))
        raster = read(x, y, crop)
        if is_white_patch(raster, white):
            continue
        kept.append(raster)
        rects.append((k, x, y, crop, crop))
    return kept, rects


def extract_all(extractor: FeatureExtractor, rasters: Sequence[np.ndarray], workers: int = 1) -> np.ndarray:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(extractor.extract, rasters))
    else:
        feats = [extractor.extract(r) for r in rasters]
    # ordered result list, so the reduction is the same for any worker count
    return np.stack(feats) if feats else np.zeros((0, extractor.dim))


def pfid(
    real_imgs: Sequence,
    synth_imgs: Sequence,
    crops_per_side: int = 2000,
    crop: int = 64,
    extractor: FeatureExtractor | str = "hist64",
    seed: int = 0,
    *,
    level: int | None = None,
    white: WhiteThreshold = WhiteThreshold(),
    workers: int = 1,
) -> FidReport:
    """Patch FID between two image sets.

    Both sets draw ``crops_per_side`` uniform crops of side ``crop`` from the
    same seed and apply the same white rule (white crops are redrawn).
    ``level=None`` reads each image's finest level.
    """
    ex = get_extractor(extractor) if isinstance(extractor, str) else extractor
    real, _ = sample_crops(real_imgs, crops_per_side, crop, seed, level=level, white=white)
    synth, _ = sample_crops(synth_imgs, crops_per_side, crop, seed, level=level, white=white)
    for name, got in (("real", real), ("synthetic", synth)):
        if len(got) < ex.dim + 1:
            raise EvalError(f"only {len(got)} usable {name} crops, need at least {ex.dim + 1}")
    rep = frechet_distance(extract_all(ex, real, workers), extract_all(ex, synth, workers))
    rep.extras.update(extractor=ex.name, seed=seed, crop=crop)
    return rep


# -- seams -------------------------------------------------------------------


def seam_positions(plan: PatchPlan) -> list[int]:
    """First column (or row) owned by each non-leading patch along one axis."""
    overlap = plan.patch - plan.stride
    return [j * plan.stride + overlap for j in range(1, plan.grid_n)]


def seam_metric(img, plan: PatchPlan, level: int | None = None) -> dict:
    """Mean absolute step across patch boundaries versus everywhere else.

    ``img`` is a :class:`TiledImage` (the level whose side equals the plan's
    is used unless ``level`` is given) or an (H, W, 3) array.
    """
    if isinstance(img, TiledImage):
        if level is None:
            match = [lv.level_index for lv in img.levels if lv.width == plan.side]
            if not match:
                raise EvalError(f"no level of side {plan.side} in image")
            level = match[-1]
        lv = img.levels[level]
        arr = img.read_region(0, 0, lv.width, lv.height, level)
    else:
        arr = np.asarray(img)
    if arr.shape[0] != plan.side or arr.shape[1] != plan.side:
        raise EvalError(f"image {arr.shape[1]}x{arr.shape[0]} does not match plan side {plan.side}")
    u = _as_unit(arr)
    dx = np.abs(np.diff(u, axis=1)).mean(axis=(0, 2))  # dx[c] is the step between columns c and c+1
    dy = np.abs(np.diff(u, axis=0)).mean(axis=(1, 2))
    seams = np.array(seam_positions(plan), dtype=int) - 1
    is_seam = np.zeros(dx.size, bool)
    is_seam[seams] = True
    interior = float(np.concatenate([dx[~is_seam], dy[~is_seam]]).mean())
    out = {"interior_grad": interior}
    if seams.size:
        seam = float(np.concatenate([dx[is_seam], dy[is_seam]]).mean())
        if interior > 0:
            ratio = seam / interior
        else:
            ratio = 1.0 if seam == 0 else float("inf")
        out.update(seam_grad=seam, ratio=ratio)
    return out


# -- human evaluation --------------------------------------------------------


@dataclass(frozen=True)
class HumanEvalRow:
    user: str
    tp: int
    fp: int

    @property
    def n(self) -> int:
        return self.tp + self.fp

    @property
    def p(self) -> float:
        return self.fp / self.n

    @property
    def abs_dev(self) -> float:
        return abs(self.p - 0.5)


@dataclass(frozen=True)
class HumanEvalTable:
    rows: tuple[HumanEvalRow, ...]
    pooled_p: float
    weighted_mae: float

    def format(self, digits: int = 4) -> str:
        lines = [f"{'user':<16}{'TP':>6}{'FP':>6}{'p':>9}{'|p-0.5|':>10}"]
        for r in self.rows:
            lines.append(f"{r.user:<16}{r.tp:>6}{r.fp:>6}{r.p:>9.{digits}f}{r.abs_dev:>10.{digits}f}")
        tp = sum(r.tp for r in self.rows)
        fp = sum(r.fp for r in self.rows)
        lines.append(f"{'total':<16}{tp:>6}{fp:>6}{self.pooled_p:>9.{digits}f}{'':>10}")
        lines.append(f"w-MAE {self.weighted_mae:.{digits}f}")
        return "\n".join(lines)


def human_eval_stats(rows) -> HumanEvalTable:
    """Per-rater fooling rate p = FP/(TP+FP), pooled p and count-weighted MAE.

    ``rows`` holds ``(user, tp, fp)`` tuples, mappings with those keys, or
    :class:`HumanEvalRow`.
    """
    parsed = []
    for r in rows:
        if isinstance(r, HumanEvalRow):
            row = r
        elif isinstance(r, dict):
            row = HumanEvalRow(str(r["user"]), int(r["tp"]), int(r["fp"]))
        else:
            row = HumanEvalRow(str(r[0]), int(r[1]), int(r[2]))
        if row.tp < 0 or row.fp < 0:
            raise EvalError(f"row {row.user!r}: negative count")
        if row.n == 0:
            raise EvalError(f"row {row.user!r}: tp + fp is zero")
        parsed.append(row)
    if not parsed:
        raise EvalError("no rows")
    total = sum(r.n for r in parsed)
    pooled = sum(r.fp for r in parsed) / total
    wmae = sum(r.n * r.abs_dev for r in parsed) / total
    return HumanEvalTable(tuple(parsed), pooled, wmae)
