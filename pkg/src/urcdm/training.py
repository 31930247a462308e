"""Stage model construction, checkpoint layout and per-stage training."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .cascade.config import STAGES_PER_CDM, CascadeConfig
from .denoiser import ConvDenoiser, TrainRun, load_checkpoint, train_stage
from .diffusion import NoiseSchedule
from .synth_data import TrainPair, make_stage_pairs

BASELINE_LEVEL = 2


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ModelArch:
    channels: int = 16
    layers: int = 4
    embed_hidden: int = 16


def cond_channels(cfg: CascadeConfig, stage_id: int, *, baseline: bool = False) -> int:
    takes_prev, takes_crop = cfg.cond_sources(stage_id)
    if baseline:
        takes_crop = False
    return 3 * (int(takes_prev) + int(takes_crop))


def build_stage_model(
    cfg: CascadeConfig, stage_id: int, arch: ModelArch = ModelArch(), *, baseline: bool = False, seed: int = 0
) -> ConvDenoiser:
    cc = cond_channels(cfg, stage_id, baseline=baseline)
    return ConvDenoiser(
        channels=arch.channels,
        layers=arch.layers,
        image_channels=3,
        cond_mode="concat" if cc else "none",
        cond_channels=cc or None,
        embed_hidden=arch.embed_hidden,
        stage_id=stage_id,
        seed=seed * 1000 + stage_id + (100 if baseline else 0),
    )


def checkpoint_path(directory, stage_id: int, *, baseline: bool = False) -> Path:
    """``stage_<id>.urcd`` for cascade stages, ``baseline_<k>.urcd`` for the outpainting chain."""
    if baseline:
        return Path(directory) / f"baseline_{stage_id % STAGES_PER_CDM}.urcd"
    return Path(directory) / f"stage_{stage_id}.urcd"


def baseline_stage_ids() -> list[int]:
    return [BASELINE_LEVEL * STAGES_PER_CDM + k for k in range(STAGES_PER_CDM)]


def load_stage_models(directory, cfg: CascadeConfig, *, baseline: bool = False, dtype=np.float32) -> list:
    """Load the 9 cascade models (or the 3 baseline models), in stage order."""
    ids = baseline_stage_ids() if baseline else list(range(cfg.num_models))
    models = []
    for s in ids:
        path = checkpoint_path(directory, s, baseline=baseline)
        if not path.exists():
            what = f"baseline stage {s % STAGES_PER_CDM}" if baseline else f"stage {s}"
            raise MissingCheckpointError(f"missing checkpoint for {what}: {path}")
        model = load_checkpoint(path, dtype=dtype)
        expect = cond_channels(cfg, s, baseline=baseline)
        if getattr(model, "cond_channels", expect) != expect:
            raise ValueError(f"{path}: model takes {model.cond_channels} conditioning channels, config implies {expect}")
        models.append(model)
    return models


def pair_pool(
    source: Iterable, cfg: CascadeConfig, stage_id: int, size: int, *, seed: int = 0, baseline: bool = False
) -> list[TrainPair]:
    pairs = list(make_stage_pairs(source, cfg, stage_id, size, seed=seed, use_crop=not baseline))
    if not pairs:
        raise ValueError(f"no training pairs for stage {stage_id} (empty or all-white corpus)")
    return pairs


def cycle_pool(pool: list[TrainPair], seed: int = 0) -> Iterator[TrainPair]:
    """Endless reshuffled passes over a fixed pair pool."""
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(pool)):
            yield pool[i]


def train_cascade_stage(
    cfg: CascadeConfig,
    stage_id: int,
    source: Iterable,
    schedule: NoiseSchedule,
    run: TrainRun,
    *,
    arch: ModelArch = ModelArch(),
    pool_size: int = 512,
    baseline: bool = False,
):
    """Build, then fit one stage on pairs drawn from ``source``; returns (model, loss curve)."""
    model = build_stage_model(cfg, stage_id, arch, baseline=baseline, seed=run.seed)
    if run.steps == 0:
        return model, []
    pool = pair_pool(source, cfg, stage_id, pool_size, seed=run.seed, baseline=baseline)
    return train_stage(model, cycle_pool(pool, run.seed), schedule, run)
