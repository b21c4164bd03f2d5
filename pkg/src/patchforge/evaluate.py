"""Surface extraction, point sampling, Chamfer distance, IoU and report rollups."""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .datagen import TriangleMesh, write_obj
from .grid import TsdfGrid

CSV_FIELDS = ["id", "category", "cd_x100", "iou"]


def marching_cubes(grid: TsdfGrid, level: float = 0.0):
    """Iso-surface at ``level`` in canonical (grid-centered) coordinates. Returns ``(mesh, empty)``."""
    v = grid.values
    if not (v.min() < level < v.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), True
    vs = grid.voxel_size
    verts, faces, _, _ = measure.marching_cubes(v.astype(np.float64), level=level, spacing=(vs, vs, vs))
    verts = verts + (0.5 * vs - 0.5 * grid.resolution * vs)
    return TriangleMesh(verts, faces.astype(np.int64)), False


def sample_surface(mesh: TriangleMesh, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def _nn_dist(src, dst):
    _, idx = cKDTree(dst).query(src, k=1)
    return np.sqrt(((src - dst[idx]) ** 2).sum(axis=1))


def chamfer_l1(a, b) -> float:
    """0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|) with exact nearest neighbours (unscaled)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return float(0.5 * (np.mean(_nn_dist(a, b)) + np.mean(_nn_dist(b, a))))


def iou(pred, gt) -> float:
    p = (pred.values if isinstance(pred, TsdfGrid) else np.asarray(pred)) < 0
    g = (gt.values if isinstance(gt, TsdfGrid) else np.asarray(gt)) < 0
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def empty_sentinel(grid: TsdfGrid) -> float:
    """Chamfer distance charged to an empty prediction: twice the grid diagonal."""
    return 2.0 * math.sqrt(3.0) * grid.resolution * grid.voxel_size


def row_seed(seed: int, row_id: str) -> int:
    return (int(seed) * 7_919 + zlib.crc32(row_id.encode("utf-8"))) % (2**32)


def score(pred: TsdfGrid, gt: TsdfGrid, n_points: int = 10_000, seed: int = 0, export: Path | None = None):
    """(cd_x100, iou, pred_empty) for one prediction; both surfaces are sampled with the same seed."""
    pm, p_empty = marching_cubes(pred)
    gm, g_empty = marching_cubes(gt)
    if export is not None and not p_empty:
        write_obj(export, pm)
    if p_empty or g_empty:
        cd = 0.0 if (p_empty and g_empty) else empty_sentinel(gt)
    else:
        cd = chamfer_l1(sample_surface(pm, n_points, seed), sample_surface(gm, n_points, seed))
    return 100.0 * cd, iou(pred, gt), p_empty


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    sentinel_cd_x100: float | None = None

    def add(self, row_id, category, cd_x100, iou_value):
        self.rows.append({"id": row_id, "category": category, "cd_x100": float(cd_x100), "iou": float(iou_value)})

    def inst_avg(self) -> dict:
        if not self.rows:
            return {"cd_x100": float("nan"), "iou": float("nan")}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in ("cd_x100", "iou")}

    def per_category(self) -> dict:
        cats = {}
        for r in self.rows:
            cats.setdefault(r["category"], []).append(r)
        return {c: {k: float(np.mean([r[k] for r in rs])) for k in ("cd_x100", "iou")}
                for c, rs in sorted(cats.items())}

    def cat_avg(self) -> dict:
        per = self.per_category()
        if not per:
            return {"cd_x100": float("nan"), "iou": float("nan")}
        return {k: float(np.mean([v[k] for v in per.values()])) for k in ("cd_x100", "iou")}

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "per_category": self.per_category(),
            "inst_avg": self.inst_avg(),
            "cat_avg": self.cat_avg(),
            "empty_prediction_cd_x100": self.sentinel_cd_x100,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "cd_x100": repr(r["cd_x100"]), "iou": repr(r["iou"])})

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_predictions(items, n_points: int = 10_000, seed: int = 0, export_dir=None) -> EvalReport:
    """``items``: iterable of (row_id, category, pred_grid, gt_grid)."""
    report = EvalReport()
    for row_id, category, pred, gt in items:
        export = None
        if export_dir is not None:
            Path(export_dir).mkdir(parents=True, exist_ok=True)
            export = Path(export_dir) / (row_id.replace("/", "_") + ".obj")
        cd, io, empty = score(pred, gt, n_points, row_seed(seed, row_id), export)
        if empty:
            report.sentinel_cd_x100 = 100.0 * empty_sentinel(gt)
        report.add(row_id, category, cd, io)
    return report


def evaluate(records, predictor, n_points: int = 10_000, seed: int = 0, split: str | None = "test",
             export_dir=None, batch_size: int = 8) -> EvalReport:
    """Run ``predictor`` (batch of partial arrays -> batch of predicted arrays) on every partial scan."""
    from .grid import read_grid

    items = []
    for r in records:
        if split is not None and r.split != split:
            continue
        gt = read_grid(r.gt_path)
        partials = [read_grid(p) for p in r.partial_paths]
        preds = []
        for i in range(0, len(partials), batch_size):
            preds.extend(predictor(np.stack([g.values for g in partials[i:i + batch_size]])))
        for k, pv in enumerate(preds):
            items.append((f"{r.sample_id}/{k}", r.category, gt.with_values(pv), gt))
    return evaluate_predictions(items, n_points, seed, export_dir)
