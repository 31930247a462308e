import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_fid
from urcdm.cascade import CascadeConfig, CdmLevel, desk_config, plan_level
from urcdm.eval import (
    EvalError,
    Hist64,
    RandProj512,
    frechet_distance,
    frechet_from_stats,
    human_eval_stats,
    pfid,
    sample_crops,
    seam_metric,
)
from urcdm.resample import quantize
from urcdm.synth_data import SceneSpec, render_scene
from urcdm.tile_store import TiledImage

LRDM = [("Pathologist 1", 250, 179), ("Pathologist 2", 106, 145), ("Pathologist 3", 29, 99), ("Non-expert", 110, 162)]
URCDM = [
    ("Pathologist 1", 61, 66),
    ("Pathologist 2", 152, 6),
    ("Pathologist 3", 28, 33),
    ("Pathologist 4", 47, 10),
    ("Non-expert", 29, 21),
]


def test_identical_sets_zero():
    a = np.random.default_rng(0).standard_normal((300, 8))
    assert abs(frechet_distance(a, a).fid) <= 1e-6


def test_one_dimensional_closed_form():
    rep = frechet_from_stats([0.0], [[1.0]], [1.0], [[1.0]])
    assert rep.fid == 1.0
    # (Δμ)² + (σa − σb)²
    assert frechet_from_stats([0.5], [[4.0]], [0.0], [[1.0]]).fid == pytest.approx(0.25 + 1.0, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_five_dim_against_extended_precision(seed):
    rng = np.random.default_rng(seed)
    m1, m2 = rng.standard_normal((2, 5, 5))
    a = rng.standard_normal((200, 5)) @ m1 + rng.standard_normal(5)
    b = rng.standard_normal((150, 5)) @ m2
    got = frechet_distance(a, b).fid
    want = oracle_fid(a, b)
    assert abs(got - want) / abs(want) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), d=st.integers(1, 6), shift=st.floats(-50, 50))
def test_fid_properties(seed, d, shift):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((40, d)) * rng.uniform(0.5, 2.0, d)
    b = rng.standard_normal((35, d)) + rng.uniform(-1, 1, d)
    ab = frechet_distance(a, b).fid
    ba = frechet_distance(b, a).fid
    assert abs(ab - ba) <= 1e-6 * max(1.0, ab)
    assert abs(frechet_distance(a[rng.permutation(40)], b).fid - ab) <= 1e-9 * max(1.0, ab)
    moved = frechet_distance(a + shift, b + shift).fid
    assert abs(moved - ab) <= 1e-8 * max(1.0, ab) * max(1.0, abs(shift))
    assert ab >= 0


def test_shrinkage_when_samples_are_few():
    rng = np.random.default_rng(3)
    rep = frechet_distance(rng.standard_normal((5, 10)), rng.standard_normal((6, 10)))
    assert np.isfinite(rep.fid) and rep.fid >= 0


def test_errors():
    a = np.zeros((5, 2))
    a[0, 0] = np.nan
    with pytest.raises(EvalError):
        frechet_distance(a, np.zeros((5, 2)))
    with pytest.raises(EvalError):
        frechet_from_stats([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], np.eye(2))
    with pytest.raises(EvalError):
        frechet_distance(np.zeros((5, 2)), np.zeros((5, 3)))


def test_extractors_deterministic():
    img = np.random.default_rng(4).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    h = Hist64().extract(img)
    assert h.shape == (64,) and h.sum() == pytest.approx(1.0)
    p1, p2 = RandProj512().extract(img), RandProj512().extract(img)
    assert p1.shape == (512,)
    np.testing.assert_array_equal(p1, p2)
    # the same picture as floats gives the same features
    np.testing.assert_allclose(Hist64().extract(img / 255.0), h)


@pytest.fixture(scope="module")
def scene_arrays():
    spec = SceneSpec(seed=7)
    return [quantize(render_scene(spec, 1.0, (0, 0, 384, 384))), quantize(render_scene(spec, 1.0, (1152, 1152, 384, 384)))]


def test_pfid_identity_and_bookkeeping(scene_arrays):
    rep = pfid(scene_arrays, scene_arrays, 300, 32, "hist64", seed=5)
    assert rep.fid <= 1e-6
    assert rep.n_a == rep.n_b == 300
    _, rects = sample_crops(scene_arrays, 300, 32, 5)
    for k, x, y, w, h in rects:
        assert 0 <= x and x + w <= 384 and 0 <= y and y + h <= 384


def test_pfid_monotone_in_noise(scene_arrays):
    rng = np.random.default_rng(6)
    noise = rng.uniform(-1, 1, (2, 384, 384, 3))
    vals = []
    for amp in (5, 10, 20):
        noisy = [quantize(np.clip(im / 255.0 + noise[k] * amp / 255.0, 0, 1)) for k, im in enumerate(scene_arrays)]
        vals.append(pfid(scene_arrays, noisy, 300, 32, "hist64", seed=5).fid)
    assert 0 < vals[0] < vals[1] < vals[2]


def test_pfid_deterministic_and_tiled_input(tmp_path, scene_arrays):
    img = TiledImage.create(tmp_path / "t", 384, 384, 128)
    img.write_region(0, 0, scene_arrays[0])
    a = pfid([img], [scene_arrays[1]], 600, 32, "randproj512", seed=9)
    b = pfid([scene_arrays[0]], [scene_arrays[1]], 600, 32, "randproj512", seed=9)
    assert a.fid == b.fid and a.fid > 0


def test_pfid_needs_enough_non_white_crops():
    white = [np.full((64, 64, 3), 255, np.uint8)]
    with pytest.raises(EvalError):
        pfid(white, white, 100, 16, "hist64")
    with pytest.raises(EvalError):
        pfid(white, white, 100, 128, "hist64")


def _stitched_fixture(plan, independent: bool):
    rng = np.random.default_rng(0)
    side = plan.side
    yy, xx = np.mgrid[0:side, 0:side] / side
    smooth = 0.5 + 0.2 * np.sin(6 * xx + 3 * yy)
    img = np.repeat(smooth[..., None], 3, axis=2)
    if independent:
        for t in plan.tasks:
            x, y, w, h = t.owned_rect
            img[y : y + h, x : x + w] = smooth[y : y + h, x : x + w, None] + rng.uniform(-0.15, 0.15)
    return quantize(np.clip(img, 0, 1))


def test_seam_metric_fixture():
    plan = plan_level(desk_config(), 1)
    bad = seam_metric(_stitched_fixture(plan, True), plan)
    assert bad["ratio"] > 3
    good = seam_metric(_stitched_fixture(plan, False), plan)
    assert good["ratio"] < 1.5


def test_seam_metric_edge_cases(tmp_path):
    cfg = desk_config()
    plan = plan_level(cfg, 1)
    flat = np.full((288, 288, 3), 128, np.uint8)
    out = seam_metric(flat, plan)
    assert out["seam_grad"] == 0 and out["interior_grad"] == 0
    chain = (16, 32, 64)
    single = plan_level(CascadeConfig((CdmLevel((4, 8, 16), 16), CdmLevel(chain, 64), CdmLevel(chain, 120))), 1)
    assert single.grid_n == 1
    only = seam_metric(np.zeros((64, 64, 3), np.uint8), single)
    assert set(only) == {"interior_grad"}
    with pytest.raises(EvalError):
        seam_metric(np.zeros((100, 100, 3), np.uint8), plan)
    img = TiledImage.create_pyramid(tmp_path / "s", [(64, 64), (288, 288)], 128)
    assert seam_metric(img, plan)["seam_grad"] == 0


def test_human_eval_table_values():
    lr = human_eval_stats(LRDM)
    assert round(lr.pooled_p, 4) == 0.5417
    assert round(lr.weighted_mae, 4) == 0.1074
    assert round(lr.rows[0].p, 4) == 0.4172
    ur = human_eval_stats(URCDM)
    assert round(ur.pooled_p, 4) == 0.3002
    assert round(ur.weighted_mae, 4) == 0.2219
    assert "0.1074" in lr.format()


def test_human_eval_row_errors():
    with pytest.raises(EvalError, match="Pathologist 9"):
        human_eval_stats([("Pathologist 1", 1, 2), ("Pathologist 9", 0, 0)])
    with pytest.raises(EvalError):
        human_eval_stats([])
    t = human_eval_stats([{"user": "a", "tp": 3, "fp": 1}])
    assert t.rows[0].p == 0.25 and t.weighted_mae == 0.25
