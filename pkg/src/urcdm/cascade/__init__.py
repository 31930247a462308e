"""Cascade geometry, scheduling and generation."""

from .config import (
    STAGES_PER_CDM,
    CascadeConfig,
    CdmLevel,
    ConfigError,
    WhiteThreshold,
    desk_config,
    full_config,
    stage_of,
)
from .geometry import (
    PatchPlan,
    PatchTask,
    conditioning_crop,
    is_white_patch,
    plan_level,
    stage_cond,
    substitute_white,
    upscale_footprint,
)
from .scheduler import ScheduleError, TraceEntry, check_trace, makespan, run_dag, wavefront_schedule
from .pipeline import (
    CallCounter,
    CoverageTracker,
    run_cdm,
    run_level,
    run_outpainting_baseline,
    run_urcdm,
    task_seed,
    world_noise,
)
