import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urcdm.cascade import ConfigError, full_config
from urcdm.cli import (
    DataParams,
    Paths,
    RunConfig,
    ScheduleParams,
    TrainParams,
    format_run_config,
    main,
    parse_run_config,
)
from urcdm.denoiser import load_checkpoint
from urcdm.tile_store import TiledImage
from urcdm.training import build_stage_model

TINY_INI = """
[run]
seed = 4

[cascade]
level0_stages = 4,8,16
level0_side = 16
level1_stages = 4,8,16
level1_side = 30
level2_stages = 4,8,16
level2_side = 58
tile_size = 128
context_margin = 4

[schedule]
num_steps = 3

[train]
steps = 0
batch = 2
crop = 0
pool_size = 16
channels = 4
layers = 2
embed_hidden = 4

[paths]
data = {root}/data
checkpoints = {root}/ck
output = {root}/out
"""

LRDM_CSV = "user,tp,fp\nPathologist 1,250,179\nPathologist 2,106,145\nPathologist 3,29,99\nNon-expert,110,162\n"


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_INI.format(root=tmp_path))
    return tmp_path, str(cfg)


def _run(cfg, *args):
    return main(["--config", cfg, *args])


def _tile_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_config_round_trip_defaults_and_full():
    for cfg in (RunConfig(), RunConfig(cascade=full_config(), seed=9, train_overrides={4: {"steps": 10, "lr": 0.5}})):
        text = format_run_config(cfg)
        assert parse_run_config(text) == cfg
        assert format_run_config(parse_run_config(text)) == text


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    steps=st.integers(0, 10**6),
    lr=st.floats(1e-8, 10, allow_nan=False),
    n=st.integers(1, 200),
    frac=st.floats(0, 0.99),
    data=st.text("abcxyz_/", min_size=1, max_size=12),
)
def test_config_round_trip_property(seed, steps, lr, n, frac, data):
    cfg = RunConfig(
        schedule=ScheduleParams(num_steps=n),
        train=TrainParams(steps=steps, lr=lr),
        data=DataParams(white_fraction_target=frac),
        paths=Paths(data=data),
        seed=seed,
        train_overrides={2: {"batch": 3}},
    )
    assert parse_run_config(format_run_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nstep = 3\n",
        "[trian]\nsteps = 3\n",
        "[cascade]\nlevel3_side = 5\n",
        "[run]\nseeed = 1\n",
        "[train]\nsteps = many\n",
        "[cascade]\npreset = huge\n",
        "[cascade]\nlevel1_side = 100\n",
        "[train.9]\nsteps = 1\n",
    ],
)
def test_config_rejects_unknown_and_invalid(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_bad_config_file_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nstpes = 1\n")
    assert main(["--config", str(bad), "config"]) == 3
    assert "stpes" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "nope.ini"), "config"]) == 3


def test_config_from_environment(tiny, monkeypatch, capsys):
    _, cfg = tiny
    monkeypatch.setenv("URCDM_CONFIG", cfg)
    from urcdm import cli

    assert cli.main(["config"]) == 0
    assert "level2_side = 58" in capsys.readouterr().out


def test_make_data_deterministic_and_collisions(tiny, capsys):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "3") == 0
    first = _tile_bytes(root / "data")
    manifest = json.loads((root / "data" / "corpus.json").read_text())
    assert len(manifest["scenes"]) == 3 and manifest["level_sides"] == [16, 30, 58]
    assert _run(cfg, "make-data", "--scenes", "3") == 3
    assert str(root / "data") in capsys.readouterr().err
    assert _run(cfg, "make-data", "--scenes", "3", "--force") == 0
    assert _tile_bytes(root / "data") == first
    assert _run(cfg, "make-data", "--scenes", "3", "--out", str(root / "other")) == 0
    assert _tile_bytes(root / "other") == first


def test_make_data_zero_scenes(tiny):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "0") == 0
    assert json.loads((root / "data" / "corpus.json").read_text())["scenes"] == []


def test_train_errors(tiny):
    _, cfg = tiny
    assert _run(cfg, "train", "--stage", "9") == 2
    assert _run(cfg, "train") == 2
    assert _run(cfg, "train", "--stage", "0") == 3  # no corpus yet
    assert _run(cfg, "make-data", "--scenes", "1") == 0
    assert _run(cfg, "train", "--stage", "0", "--steps", "-1") == 2


def test_train_zero_steps_is_initialization(tiny):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "2") == 0
    assert _run(cfg, "train", "--stage", "4") == 0
    got = load_checkpoint(root / "ck" / "stage_4.urcd")
    conf = parse_run_config(Path(cfg).read_text())
    init = build_stage_model(conf.cascade, 4, conf.train.arch, seed=conf.seed)
    for p, q in zip(got.params, init.params):
        np.testing.assert_array_equal(p, q)
    assert (root / "ck" / "stage_4.loss.csv").read_text() == "step,loss\n"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_is_numeric_failure(tiny, capsys):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "2") == 0
    with open(cfg, "a") as fh:
        fh.write("\n[train.0]\nsteps = 50\nlr = 1e38\n")
    assert _run(cfg, "train", "--stage", "0") == 4
    assert "step" in capsys.readouterr().err


def test_parallel_training_processes(tiny):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "2") == 0
    env = dict(os.environ, URCDM_CONFIG=cfg)
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "urcdm.cli", "train", "--stage", s, "--steps", "20"], env=env,
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        for s in ("0", "4")
    ]
    for p in procs:
        _, err = p.communicate(timeout=300)
        assert p.returncode == 0, err.decode()
    assert load_checkpoint(root / "ck" / "stage_0.urcd").stage_id == 0
    assert load_checkpoint(root / "ck" / "stage_4.urcd").stage_id == 4
    assert len((root / "ck" / "stage_4.loss.csv").read_text().splitlines()) == 21


@pytest.fixture
def trained(tiny):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "2") == 0
    for s in range(9):
        assert _run(cfg, "train", "--stage", str(s), "--steps", "3") == 0
    return root, cfg


def test_sample_threads_identical_and_logged(trained):
    root, cfg = trained
    assert _run(cfg, "sample", "--threads", "1", "--out", str(root / "a")) == 0
    assert _run(cfg, "sample", "--threads", "8", "--out", str(root / "b")) == 0
    assert _tile_bytes(root / "a") == _tile_bytes(root / "b")
    img = TiledImage.open(root / "a")
    assert [lv.width for lv in img.levels] == [16, 30, 58]
    recs = [json.loads(line) for line in (root / "a.progress.jsonl").read_text().splitlines()]
    assert len(recs) == 1 + 4 + 16
    assert {"level", "i", "j", "white", "millis", "worker"} <= set(recs[0])
    assert _run(cfg, "sample", "--out", str(root / "a")) == 3
    assert _run(cfg, "sample", "--out", str(root / "a"), "--seed", "5", "--force") == 0
    assert _tile_bytes(root / "a") != _tile_bytes(root / "b")


def test_sample_missing_checkpoint_names_stage(trained, capsys):
    root, cfg = trained
    (root / "ck" / "stage_7.urcd").unlink()
    assert _run(cfg, "sample") == 3
    assert "stage 7" in capsys.readouterr().err


def test_sample_outpainting_baseline(trained, capsys):
    root, cfg = trained
    assert _run(cfg, "sample", "--mode", "outpaint-baseline") == 3
    assert "baseline stage 0" in capsys.readouterr().err
    for k in range(3):
        assert _run(cfg, "train", "--baseline-stage", str(k), "--steps", "2") == 0
    assert _run(cfg, "sample", "--mode", "outpaint-baseline", "--out", str(root / "base")) == 0
    img = TiledImage.open(root / "base")
    assert [lv.width for lv in img.levels] == [58]


def test_eval_same_dirs_zero(tiny, capsys):
    root, cfg = tiny
    assert _run(cfg, "make-data", "--scenes", "2") == 0
    capsys.readouterr()
    report = root / "r.json"
    d = str(root / "data")
    assert _run(cfg, "eval", "--real", d, "--synth", d, "--crops", "200", "--crop", "16", "--out", str(report)) == 0
    body = json.loads(report.read_text())
    assert body["metric"] == "pfid" and body["extractor"] == "hist64" and body["seed"] == 4
    assert body["n_a"] == body["n_b"] == 200
    assert abs(body["fid"]) <= 1e-6
    assert json.loads(capsys.readouterr().out) == body
    assert _run(cfg, "eval", "--real", d, "--synth", str(root / "missing")) == 3


def test_stats_table(tmp_path, capsys):
    path = tmp_path / "lrdm.csv"
    path.write_text(LRDM_CSV)
    assert main(["stats", str(path)]) == 0
    out = capsys.readouterr().out
    assert "w-MAE 0.1074" in out and "0.5417" in out
    path.write_text("name,tp,fp\na,1,2\n")
    assert main(["stats", str(path)]) == 3
    path.write_text("user,tp,fp\na,0,0\n")
    assert main(["stats", str(path)]) == 3
    assert main(["stats", str(tmp_path / "none.csv")]) == 3


def test_export_fresh_image_is_white(tmp_path):
    from PIL import Image

    TiledImage.create_pyramid(tmp_path / "img", [(40, 40), (300, 200)], 128)
    assert main(["export", str(tmp_path / "img"), str(tmp_path / "l0.png"), "--level", "0"]) == 0
    arr = np.asarray(Image.open(tmp_path / "l0.png"))
    assert arr.shape == (40, 40, 3) and np.all(arr == 255)
    assert main(["export", str(tmp_path / "img"), str(tmp_path / "r.png"), "--rect", "10,20,30,5"]) == 0
    assert np.asarray(Image.open(tmp_path / "r.png")).shape == (5, 30, 3)
    assert main(["export", str(tmp_path / "img"), str(tmp_path / "x.png"), "--level", "5"]) == 2
    assert main(["export", str(tmp_path / "img"), str(tmp_path / "x.png"), "--rect", "1,2"]) == 2
    # regions past the edge read as white padding, like read_region
    assert main(["export", str(tmp_path / "img"), str(tmp_path / "x.png"), "--rect", "290,0,20,5"]) == 0
    assert np.all(np.asarray(Image.open(tmp_path / "x.png")) == 255)
    assert main(["export", str(tmp_path / "missing"), str(tmp_path / "x.png")]) == 3
