"""``urcdm`` command line: corpus generation, training, sampling, evaluation.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from PIL import Image

from .cascade.config import STAGES_PER_CDM, CascadeConfig, CdmLevel, ConfigError, WhiteThreshold, desk_config, full_config
from .cascade.pipeline import run_outpainting_baseline, run_urcdm
from .denoiser import TrainRun, save_checkpoint
from .diffusion import NoiseSchedule, NumericError
from .eval import EvalError, human_eval_stats, pfid
from .synth_data import SceneSpec, scene_stream, write_scene
from .tile_store import MANIFEST, StoreError, TiledImage
from .training import ModelArch, baseline_stage_ids, checkpoint_path, load_stage_models, train_cascade_stage

log = logging.getLogger("urcdm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ENV = "URCDM_CONFIG"
CORPUS_MANIFEST = "corpus.json"


class UsageError(Exception):
    pass


# -- run config ----------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleParams:
    num_steps: int = 8
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    # 0 is the deterministic update; > 0 adds ancestral noise while sampling
    eta: float = 0.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.geometric(self.num_steps, self.sigma_max, self.sigma_min)


@dataclass(frozen=True)
class TrainParams:
    steps: int = 1500
    batch: int = 8
    lr: float = 2e-3
    crop: int = 32  # 0 trains on whole targets
    clip_norm: float = 1.0
    pool_size: int = 1024
    channels: int = 16
    layers: int = 4
    embed_hidden: int = 16

    def run(self, seed: int) -> TrainRun:
        return TrainRun(
            steps=self.steps, batch=self.batch, lr=self.lr, seed=seed, crop=self.crop or None, clip_norm=self.clip_norm
        )

    @property
    def arch(self) -> ModelArch:
        return ModelArch(self.channels, self.layers, self.embed_hidden)


@dataclass(frozen=True)
class DataParams:
    blob_density: float = 0.55
    texture_octaves: int = 7
    white_fraction_target: float = 0.3


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    checkpoints: str = "checkpoints"
    output: str = "out"


@dataclass(frozen=True)
class RunConfig:
    cascade: CascadeConfig = field(default_factory=desk_config)
    schedule: ScheduleParams = ScheduleParams()
    train: TrainParams = TrainParams()
    # stage id -> overrides of ``train`` for that stage
    train_overrides: dict = field(default_factory=dict)
    data: DataParams = DataParams()
    paths: Paths = Paths()
    seed: int = 0

    def train_for(self, stage_id: int) -> TrainParams:
        return replace(self.train, **self.train_overrides.get(stage_id, {}))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _join(vals) -> str:
    return ",".join(str(v) for v in vals)


def _section_values(parser, section: str, cls) -> dict:
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = getattr(cls(), key)
        try:
            out[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    return out


_CASCADE_KEYS = {
    "preset", "overlap_fraction", "tile_size", "white_pixel_level", "white_fraction", "external_cond_stages",
    "context_margin", "shared_noise",
}
_CASCADE_KEYS |= {f"level{i}_{k}" for i in range(3) for k in ("stages", "side")}


def _cascade_from(parser) -> CascadeConfig:
    if not parser.has_section("cascade"):
        return desk_config()
    sec = parser["cascade"]
    for key in sec:
        if key not in _CASCADE_KEYS:
            raise ConfigError(f"unknown key {key!r} in [cascade]")
    presets = {"desk": desk_config, "full": full_config}
    name = sec.get("preset", "desk")
    if name not in presets:
        raise ConfigError(f"unknown cascade preset {name!r}; expected one of {sorted(presets)}")
    base = presets[name]()
    levels = []
    for i, lv in enumerate(base.cdm_levels):
        stages = _ints(sec[f"level{i}_stages"]) if f"level{i}_stages" in sec else lv.stage_resolutions
        side = sec.getint(f"level{i}_side", lv.output_image_side)
        levels.append(CdmLevel(stages, side))
    white = WhiteThreshold(
        sec.getfloat("white_pixel_level", base.white_threshold.pixel_level),
        sec.getfloat("white_fraction", base.white_threshold.fraction),
    )
    ext = _ints(sec["external_cond_stages"]) if "external_cond_stages" in sec else base.external_cond_stages
    return CascadeConfig(
        tuple(levels),
        overlap_fraction=sec.getfloat("overlap_fraction", base.overlap_fraction),
        white_threshold=white,
        tile_size=sec.getint("tile_size", base.tile_size),
        external_cond_stages=ext,
        context_margin=sec.getint("context_margin", base.context_margin),
        shared_noise=sec.getboolean("shared_noise", base.shared_noise),
    )


def parse_run_config(text: str) -> RunConfig:
    """Parse INI text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    overrides = {}
    for name in parser.sections():
        if name in ("run", "cascade", "schedule", "train", "data", "paths"):
            continue
        head, _, stage = name.partition(".")
        if head == "train" and stage.isdigit() and int(stage) < 9:
            overrides[int(stage)] = _section_values(parser, name, TrainParams)
            continue
        raise ConfigError(f"unknown section [{name}]")
    seed = 0
    if parser.has_section("run"):
        for key in parser["run"]:
            if key != "seed":
                raise ConfigError(f"unknown key {key!r} in [run]")
        seed = parser["run"].getint("seed", 0)

    def sec(name, cls):
        return cls(**_section_values(parser, name, cls)) if parser.has_section(name) else cls()

    try:
        return RunConfig(
            cascade=_cascade_from(parser),
            schedule=sec("schedule", ScheduleParams),
            train=sec("train", TrainParams),
            train_overrides=overrides,
            data=sec("data", DataParams),
            paths=sec("paths", Paths),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_run_config(cfg: RunConfig) -> str:
    """Serialize to INI; ``parse_run_config`` of the result gives back ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed)}
    c = cfg.cascade
    cas = {"preset": "desk"}
    for i, lv in enumerate(c.cdm_levels):
        cas[f"level{i}_stages"] = _join(lv.stage_resolutions)
        cas[f"level{i}_side"] = str(lv.output_image_side)
    cas.update(
        overlap_fraction=repr(c.overlap_fraction),
        tile_size=str(c.tile_size),
        white_pixel_level=repr(c.white_threshold.pixel_level),
        white_fraction=repr(c.white_threshold.fraction),
        external_cond_stages=_join(c.external_cond_stages),
        context_margin=str(c.context_margin),
        shared_noise=str(c.shared_noise).lower(),
    )
    parser["cascade"] = cas
    for name, obj in (("schedule", cfg.schedule), ("train", cfg.train), ("data", cfg.data), ("paths", cfg.paths)):
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(obj).items()}
    for stage in sorted(cfg.train_overrides):
        parser[f"train.{stage}"] = {k: str(v) for k, v in cfg.train_overrides[stage].items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


# -- helpers -------------------------------------------------------------------


def _corpus_scenes(data_dir: Path) -> list[TiledImage]:
    path = data_dir / CORPUS_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus at {data_dir} (missing {CORPUS_MANIFEST}); run make-data first")
    manifest = json.loads(path.read_text())
    return [TiledImage.open(data_dir / s["name"]) for s in manifest["scenes"]]


def _images_in(directory) -> list[TiledImage]:
    """A tiled image directory, or a directory whose subdirectories are tiled images."""
    d = Path(directory)
    if (d / MANIFEST).exists():
        return [TiledImage.open(d)]
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    found = [TiledImage.open(p) for p in sorted(d.iterdir()) if (p / MANIFEST).exists()]
    if not found:
        raise FileNotFoundError(f"no tiled images in {d}")
    return found


def _rect(text: str) -> tuple[int, int, int, int]:
    vals = _ints(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("rect must be x,y,w,h")
    return vals


# -- commands ------------------------------------------------------------------


def cmd_make_data(cfg: RunConfig, args) -> int:
    root = Path(args.out or cfg.paths.data)
    manifest = root / CORPUS_MANIFEST
    if manifest.exists() and not args.force:
        raise FileExistsError(f"{root} already holds a corpus (use --force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    template = SceneSpec(
        0, cfg.cascade.side(2), cfg.data.blob_density, cfg.data.texture_octaves, cfg.data.white_fraction_target
    )
    scenes = []
    for k, spec in enumerate(itertools.islice(scene_stream(cfg.seed, template), args.scenes)):
        name = f"scene_{k:04d}"
        write_scene(spec, cfg.cascade, root / name, overwrite=args.force)
        scenes.append({"name": name, "seed": spec.seed})
        log.info("wrote %s (seed %d)", name, spec.seed)
    body = {"master_seed": cfg.seed, "level_sides": cfg.cascade.level_sides, "scenes": scenes}
    manifest.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    print(f"{len(scenes)} scenes in {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    baseline = args.baseline_stage is not None
    stage = baseline_stage_ids()[args.baseline_stage] if baseline else args.stage
    params = cfg.train_for(stage)
    if args.steps is not None:
        params = replace(params, steps=args.steps)
    scenes = _corpus_scenes(Path(args.data or cfg.paths.data))
    ck_dir = Path(args.checkpoints or cfg.paths.checkpoints)
    ck_dir.mkdir(parents=True, exist_ok=True)
    # a bounded number of passes so an all-white corpus fails instead of spinning
    source = itertools.islice(itertools.cycle(scenes), len(scenes) * 256)
    t0 = time.perf_counter()
    model, curve = train_cascade_stage(
        cfg.cascade, stage, source, cfg.schedule.build(), params.run(cfg.seed),
        arch=params.arch, pool_size=params.pool_size, baseline=baseline,
    )
    path = checkpoint_path(ck_dir, stage, baseline=baseline)
    save_checkpoint(model, path)
    csv_path = path.with_suffix(".loss.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(curve))
    print(f"{path} ({len(curve)} steps, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.paths.output)
    ck_dir = Path(args.checkpoints or cfg.paths.checkpoints)
    baseline = args.mode == "outpaint-baseline"
    models = load_stage_models(ck_dir, cfg.cascade, baseline=baseline)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".progress.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:

        def progress(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        kw = dict(schedule=cfg.schedule.build(), eta=cfg.schedule.eta, threads=args.threads, progress=progress, overwrite=args.force)
        t0 = time.perf_counter()
        if baseline:
            run_outpainting_baseline(models, cfg.cascade, seed, out, **kw)
        else:
            run_urcdm(models, cfg.cascade, seed, out, **kw)
    print(f"{out} ({time.perf_counter() - t0:.1f}s, log {log_path})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    real, synth = _images_in(args.real), _images_in(args.synth)
    rep = pfid(
        real, synth, args.crops, args.crop, args.extractor, cfg.seed if args.seed is None else args.seed,
        white=cfg.cascade.white_threshold, workers=args.threads,
    )
    body = {
        "metric": "pfid",
        "n_a": rep.n_a,
        "n_b": rep.n_b,
        "extractor": rep.extras["extractor"],
        "fid": rep.fid,
        "seed": rep.extras["seed"],
        "crop": rep.extras["crop"],
    }
    text = json.dumps(body, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_stats(cfg: RunConfig, args) -> int:
    try:
        with open(args.csv, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"user", "tp", "fp"} <= set(reader.fieldnames):
                raise EvalError(f"{args.csv}: header must contain user,tp,fp")
            rows = [(r["user"], int(r["tp"]), int(r["fp"])) for r in reader]
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {args.csv}: {exc}") from exc
    print(human_eval_stats(rows).format())
    return EXIT_OK


def cmd_export(cfg: RunConfig, args) -> int:
    img = TiledImage.open(args.image)
    level = args.level if args.level is not None else len(img.levels) - 1
    if not 0 <= level < len(img.levels):
        raise UsageError(f"level {level} out of range 0..{len(img.levels) - 1}")
    lv = img.levels[level]
    x, y, w, h = args.rect or (0, 0, lv.width, lv.height)
    Image.fromarray(img.read_region(x, y, w, h, level)).save(args.out)
    print(f"{args.out} ({w}x{h} from level {level})")
    return EXIT_OK


def cmd_config(cfg: RunConfig, args) -> int:
    sys.stdout.write(format_run_config(cfg))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urcdm", description=__doc__.splitlines()[0])
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV), help=f"INI run config (default ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="render a procedural corpus")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--out", help="corpus directory (default paths.data)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train one stage model")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--stage", type=int, choices=range(9), metavar="{0..8}")
    g.add_argument("--baseline-stage", type=int, choices=range(STAGES_PER_CDM), metavar="{0..2}")
    s.add_argument("--steps", type=int)
    s.add_argument("--data")
    s.add_argument("--checkpoints")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate one image")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--mode", choices=("urcdm", "outpaint-baseline"), default="urcdm")
    s.add_argument("--out")
    s.add_argument("--checkpoints")
    s.add_argument("--log", help="JSON-lines progress log (default <out>.progress.jsonl)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="patch FID between two image directories")
    s.add_argument("--real", required=True)
    s.add_argument("--synth", required=True)
    s.add_argument("--crops", type=int, default=2000)
    s.add_argument("--crop", type=int, default=64)
    s.add_argument("--extractor", choices=("hist64", "randproj512"), default="hist64")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", help="write the JSON report here too")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="human-evaluation table from a user,tp,fp CSV")
    s.add_argument("csv")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("export", help="write a region of a tiled image as PNG")
    s.add_argument("image")
    s.add_argument("out")
    s.add_argument("--level", type=int)
    s.add_argument("--rect", type=_rect, help="x,y,w,h (default: the whole level)")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("config", help="print the effective run config")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "steps", None) is not None and args.steps < 0:
            raise UsageError("--steps must be >= 0")
        cfg = load_run_config(args.config)
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"urcdm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"urcdm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, EvalError, StoreError, OSError, ValueError, KeyError) as exc:
        print(f"urcdm: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
