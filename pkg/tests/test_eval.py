import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from patchforge.datagen import TriangleMesh
from patchforge.evaluate import (EvalReport, chamfer_l1, empty_sentinel, evaluate_predictions, iou,
                                 marching_cubes, sample_surface, score)
from patchforge.grid import TsdfGrid, voxel_centers

VS = 1.1 / 32


def field_grid(fn, D=32, t=2.5):
    c = voxel_centers(D, VS)
    return TsdfGrid(np.clip(fn(c) / VS, -t, t), t, VS)


def brute_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


# marching cubes ----------------------------------------------------------------------------

def test_sphere_vertices_on_radius():
    g = field_grid(lambda c: np.linalg.norm(c, axis=-1) - 0.3)
    mesh, empty = marching_cubes(g)
    assert not empty and len(mesh.triangles) > 0
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.3).max() <= 0.5 * g.voxel_size


def test_plane_vertices_exact():
    g = field_grid(lambda c: c[..., 0] - 0.1)
    mesh, _ = marching_cubes(g)
    assert np.abs(mesh.vertices[:, 0] - 0.1).max() < 1e-5


def test_single_sign_grid_is_empty():
    mesh, empty = marching_cubes(TsdfGrid(np.full((8, 8, 8), 2.5), 2.5, 0.1))
    assert empty and len(mesh.triangles) == 0
    _, empty = marching_cubes(TsdfGrid(np.full((8, 8, 8), -1.0), 2.5, 0.1))
    assert empty


# sampling -----------------------------------------------------------------------------------

def unit_square():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_square_sampling_is_uniform():
    pts = sample_surface(unit_square(), 10_000, seed=0)
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=5, range=[[0, 1], [0, 1]])
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_single_triangle_barycentric():
    tri = np.array([[0.1, 0.2, 0.3], [1.0, -0.5, 0.2], [0.3, 0.9, -0.4]])
    pts = sample_surface(TriangleMesh(tri, np.array([[0, 1, 2]])), 500, seed=3)
    # solve pts = a + u (b - a) + v (c - a) in least squares, then check the simplex constraints
    M = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)
    uv, *_ = np.linalg.lstsq(M, (pts - tri[0]).T, rcond=None)
    assert np.allclose(M @ uv + tri[0][:, None], pts.T, atol=1e-12)
    assert (uv >= -1e-12).all() and (uv.sum(0) <= 1 + 1e-12).all()


def test_single_sample_on_surface():
    pts = sample_surface(unit_square(), 1, seed=0)
    assert pts.shape == (1, 3)
    assert pts[0, 2] == 0 and 0 <= pts[0, 0] <= 1 and 0 <= pts[0, 1] <= 1


def test_sampling_deterministic_per_seed():
    assert np.array_equal(sample_surface(unit_square(), 50, 7), sample_surface(unit_square(), 50, 7))
    assert not np.array_equal(sample_surface(unit_square(), 50, 7), sample_surface(unit_square(), 50, 8))


# chamfer ------------------------------------------------------------------------------------

def test_chamfer_identity():
    a = np.random.default_rng(0).normal(size=(100, 3))
    assert chamfer_l1(a, a) == 0.0


def test_chamfer_two_points():
    cd = chamfer_l1(np.array([[0.0, 0, 0]]), np.array([[0.07, 0, 0]]))
    assert 100 * cd == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_chamfer_matches_brute_force_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(37, 3))
    assert chamfer_l1(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12, abs=0)
    assert chamfer_l1(a, b) == chamfer_l1(b, a)


# iou ----------------------------------------------------------------------------------------

def test_iou_basic_cases():
    a = np.full((8, 8, 8), 1.0)
    a[:4] = -1
    b = np.full((8, 8, 8), 1.0)
    b[4:] = -1
    assert iou(a, a) == 1.0
    assert iou(a, b) == 0.0
    assert iou(np.ones((4, 4, 4)), np.ones((4, 4, 4))) == 1.0


def test_iou_shifted_cubes_against_voxel_loop():
    D = 32
    a = np.ones((D, D, D))
    b = np.ones((D, D, D))
    a[4:20, 4:20, 4:20] = -1
    b[12:28, 4:20, 4:20] = -1
    inter = union = 0
    for idx in np.ndindex(D, D, D):
        pa, pb = a[idx] < 0, b[idx] < 0
        inter += pa and pb
        union += pa or pb
    assert iou(a, b) == inter / union
    assert iou(a, b) == pytest.approx(1 / 3)


# scoring and reports -------------------------------------------------------------------------

def test_score_gt_against_itself():
    g = field_grid(lambda c: np.linalg.norm(c, axis=-1) - 0.3)
    cd, io, empty = score(g, g, n_points=2000, seed=4)
    assert cd == 0.0 and io == 1.0 and not empty


def test_score_empty_prediction_uses_sentinel():
    g = field_grid(lambda c: np.linalg.norm(c, axis=-1) - 0.3)
    cd, io, empty = score(g.with_values(np.full((32,) * 3, 2.5)), g, n_points=500)
    assert empty and io == 0.0
    assert cd == pytest.approx(100 * 2 * np.sqrt(3) * 1.1)
    assert cd == 100 * empty_sentinel(g)


def test_rollups_on_three_rows(tmp_path):
    rep = EvalReport()
    rep.add("a/0", "chair", 2.0, 0.5)
    rep.add("a/1", "chair", 4.0, 0.7)
    rep.add("b/0", "table", 9.0, 0.2)
    assert rep.inst_avg() == pytest.approx({"cd_x100": 5.0, "iou": 1.4 / 3})
    assert rep.per_category()["chair"] == pytest.approx({"cd_x100": 3.0, "iou": 0.6})
    assert rep.cat_avg() == pytest.approx({"cd_x100": 6.0, "iou": 0.4})
    rep.write_csv(tmp_path / "r.csv")
    rep.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["id", "category", "cd_x100", "iou"]
    assert float(rows[2]["cd_x100"]) == 9.0
    assert json.loads((tmp_path / "r.json").read_text())["cat_avg"]["cd_x100"] == pytest.approx(6.0)


def test_evaluate_predictions_exports_meshes(tmp_path):
    g = field_grid(lambda c: np.linalg.norm(c, axis=-1) - 0.3)
    rep = evaluate_predictions([("s/0", "ball", g, g)], n_points=300, seed=0, export_dir=tmp_path / "m")
    assert rep.rows[0]["cd_x100"] == 0.0
    assert (tmp_path / "m" / "s_0.obj").exists()
