"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline
from .datagen import ScanConfig, generate_dataset, load_manifest
from .evaluate import evaluate_predictions
from .grid import TsdfGrid
from .net import ModelConfig
from .shapes import write_synthetic_meshes
from .train import TrainConfig, pairs_from_manifest

log = logging.getLogger(__name__)


@dataclass
class OverfitConfig:
    per_category: dict = field(default_factory=lambda: {"table": 4, "chair": 4})
    d: int = 32
    resolutions: tuple = (32, 8, 4)
    s1_steps: int = 500
    s1_lr: float = 0.01
    s2_steps: int = 300
    s2_lr: float = 0.003
    n_points: int = 10_000
    seed: int = 0

    def stage_config(self, stage: str, steps: int, lr: float, batch: int) -> TrainConfig:
        # one batch per epoch here, so halve late in the run rather than at epoch 50
        return TrainConfig(lr0=lr, epochs=steps, lr_halve_epoch=max(1, int(steps * 0.8)), batch_size=batch,
                           seed=self.seed, stage=stage, max_steps=steps)


def _score(pairs, predict, n_points, seed, voxel_size, truncation):
    preds = predict(np.stack([p.partial for p in pairs]))
    items = []
    for p, pv in zip(pairs, preds):
        gt = TsdfGrid(p.gt, truncation, voxel_size)
        items.append((p.sample_id, p.category, gt.with_values(pv), gt))
    return evaluate_predictions(items, n_points, seed)


def run_overfit(workdir, cfg: OverfitConfig = OverfitConfig()) -> dict:
    """Fit every stage on a handful of synthetic shapes and score on the same scans.

    Returns final stage-1 losses, per-model mean Chamfer (x100) and wall times.
    """
    work = Path(workdir)
    t0 = time.time()
    write_synthetic_meshes(work / "meshes", cfg.per_category, seed=cfg.seed)
    scan = ScanConfig()
    generate_dataset(work / "meshes", work / "data", scan, seed=cfg.seed)
    records = load_manifest(work / "data" / "manifest.json")
    pairs = pairs_from_manifest(records, "train", max_partials=1)
    model_cfg = ModelConfig(d=cfg.d, resolutions=list(cfg.resolutions))
    ckpt = work / "ckpt"
    pipeline.init_pool(records, model_cfg, ckpt)
    out = {"n_pairs": len(pairs), "times": {"data": time.time() - t0}, "s1_loss": {}, "s1_min_loss": {},
           "cd_x100": {}, "iou": {}}
    batch = len(pairs)
    for R in cfg.resolutions:
        t = time.time()
        model, pool, curve = pipeline.run_stage1(records, ckpt, R, cfg.stage_config(f"s1_{R}", cfg.s1_steps,
                                                                                 cfg.s1_lr, batch),
                                                 max_partials=1)
        out["s1_loss"][R] = curve[-1]["loss"]
        out["s1_min_loss"][R] = min(r["loss"] for r in curve)
        rep = _score(pairs, pipeline.stage1_predictor(model, pool), cfg.n_points, cfg.seed, scan.voxel_size,
                     scan.truncation)
        out["cd_x100"][f"{R}-only"] = rep.inst_avg()["cd_x100"]
        out["iou"][f"{R}-only"] = rep.inst_avg()["iou"]
        out["times"][f"s1_{R}"] = time.time() - t
        log.info("stage-1 R=%d loss %.4f cd %.3f", R, out["s1_loss"][R], out["cd_x100"][f"{R}-only"])
    t = time.time()
    mm, curve = pipeline.run_stage2(records, ckpt, cfg.stage_config("s2", cfg.s2_steps, cfg.s2_lr, batch),
                                    max_partials=1)
    out["s2_loss"] = curve[-1]["loss"]
    rep = _score(pairs, pipeline.multires_predictor(mm), cfg.n_points, cfg.seed, scan.voxel_size, scan.truncation)
    out["cd_x100"]["full"] = rep.inst_avg()["cd_x100"]
    out["iou"]["full"] = rep.inst_avg()["iou"]
    out["times"]["s2"] = time.time() - t
    out["times"]["total"] = time.time() - t0
    return out
