from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

STAGES_PER_CDM = 3
NUM_LEVELS = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CdmLevel:
    stage_resolutions: tuple[int, ...]
    output_image_side: int


@dataclass(frozen=True)
class WhiteThreshold:
    pixel_level: float = 0.9  # fraction of full scale, applied to min(R, G, B)
    fraction: float = 0.98


@dataclass(frozen=True)
class CascadeConfig:
    """Geometry of the three chained CDMs.

    Level 0 is generated whole; levels 1 and 2 are tiled with square patches
    of the level's final stage resolution, overlapping by ``overlap_fraction``.
    """

    cdm_levels: tuple[CdmLevel, ...]
    overlap_fraction: float = 0.125
    white_threshold: WhiteThreshold = field(default_factory=WhiteThreshold)
    tile_size: int = 256
    # stages of CDMs 1-2 that also receive the lower-magnification crop
    external_cond_stages: tuple[int, ...] = (0,)
    # extra context (final-stage pixels) sampled around each tiled patch, then cropped
    context_margin: int = 0
    # start every patch from a window of one noise field anchored to image coordinates
    shared_noise: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.cdm_levels) != NUM_LEVELS:
            raise ConfigError(f"need exactly {NUM_LEVELS} CDM levels, got {len(self.cdm_levels)}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must be in [0, 1)")
        if not set(self.external_cond_stages) <= set(range(STAGES_PER_CDM)) or 0 not in self.external_cond_stages:
            raise ConfigError("external_cond_stages must include 0 and lie in 0..2")
        if self.context_margin < 0:
            raise ConfigError("context_margin must be >= 0")
        prev_side = 0
        for lvl, c in enumerate(self.cdm_levels):
            res = c.stage_resolutions
            if len(res) != STAGES_PER_CDM:
                raise ConfigError(f"level {lvl}: need {STAGES_PER_CDM} stage resolutions")
            if any(b <= a for a, b in zip(res, res[1:])):
                raise ConfigError(f"level {lvl}: stage resolutions must be strictly increasing")
            if c.output_image_side <= prev_side:
                raise ConfigError(f"level {lvl}: side must exceed the previous level")
            prev_side = c.output_image_side
            if lvl == 0:
                if c.output_image_side != res[-1]:
                    raise ConfigError("level 0 side must equal its final stage resolution")
                continue
            patch = res[-1]
            if any(self.context_margin * r % patch for r in res):
                raise ConfigError(f"level {lvl}: context_margin {self.context_margin} does not scale to every stage")
            stride = patch * (1 - self.overlap_fraction)
            if stride != int(stride) or stride <= 0:
                raise ConfigError(f"level {lvl}: stride {stride} is not a positive integer")
            if c.output_image_side < patch or (c.output_image_side - patch) % int(stride):
                raise ConfigError(
                    f"level {lvl}: side {c.output_image_side} != patch {patch} + (n-1)*stride {int(stride)}"
                )

    # -- derived geometry -----------------------------------------------------

    def side(self, level: int) -> int:
        return self.cdm_levels[level].output_image_side

    def patch(self, level: int) -> int:
        return self.cdm_levels[level].stage_resolutions[-1]

    def stride(self, level: int) -> int:
        return int(self.patch(level) * (1 - self.overlap_fraction))

    def overlap(self, level: int) -> int:
        return self.patch(level) - self.stride(level)

    def zoom(self, level: int) -> Fraction:
        """Linear magnification of ``level`` relative to the level below."""
        return Fraction(self.side(level), self.side(level - 1))

    def stage_resolution(self, stage_id: int) -> int:
        level, k = divmod(stage_id, STAGES_PER_CDM)
        return self.cdm_levels[level].stage_resolutions[k]

    @property
    def level_sides(self) -> list[int]:
        return [c.output_image_side for c in self.cdm_levels]

    @property
    def num_models(self) -> int:
        return NUM_LEVELS * STAGES_PER_CDM

    def cond_sources(self, stage_id: int) -> tuple[bool, bool]:
        """(takes previous-stage output, takes lower-magnification crop)."""
        level, k = divmod(stage_id, STAGES_PER_CDM)
        return k > 0, level > 0 and k in self.external_cond_stages


def stage_of(level: int, k: int) -> int:
    return level * STAGES_PER_CDM + k


def full_config() -> CascadeConfig:
    """Full-scale geometry: 1024 base image, 6400 and 41344 sides, 12.5% overlap."""
    chain = (64, 256, 1024)
    return CascadeConfig(
        cdm_levels=(CdmLevel(chain, 1024), CdmLevel(chain, 6400), CdmLevel(chain, 41344)),
        tile_size=1024,
        context_margin=64,
        shared_noise=True,
    )


def desk_config() -> CascadeConfig:
    """Same grid arithmetic at roughly 1/18 linear scale (64 / 288 / 2304)."""
    chain = (16, 32, 64)
    return CascadeConfig(
        cdm_levels=(CdmLevel(chain, 64), CdmLevel(chain, 288), CdmLevel(chain, 2304)),
        tile_size=256,
        context_margin=4,
        shared_noise=True,
    )
