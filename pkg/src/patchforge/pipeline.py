"""Checkpoint-directory layout and the stage runners shared by the CLI and scripts.

A checkpoint directory holds ``model.json`` (model config + category order),
``priors_init.ckpt``, ``s1_<R>.ckpt`` (encoders + learned priors), ``s2.ckpt`` and
optionally ``finetune.ckpt`` (input encoders only).
"""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diff
from .evaluate import evaluate
from .net import ModelConfig, MultiResModel, PatchPriorModel
from .priors import PriorPool, init_priors
from .train import (TrainConfig, finetune_input_encoders, gt_by_category, pairs_from_manifest,
                    predict, train_stage1, train_stage2)

log = logging.getLogger(__name__)


def _write_meta(ckpt_dir: Path, model_cfg: ModelConfig, categories):
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model": model_cfg.to_dict(), "categories": list(categories)}
    (ckpt_dir / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(ckpt_dir) -> tuple[ModelConfig, list]:
    path = Path(ckpt_dir) / "model.json"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint metadata {path}")
    meta = json.loads(path.read_text())
    return ModelConfig(**meta["model"]), meta["categories"]


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return path


def init_pool(records, model_cfg: ModelConfig, ckpt_dir=None, bandwidth_scale: float = 0.5) -> PriorPool:
    shapes = gt_by_category(records, "train")
    if not shapes:
        raise ValueError("manifest has no training samples")
    pool = init_priors(shapes, k_max=model_cfg.k_max_priors, bandwidth_scale=bandwidth_scale,
                       truncation=model_cfg.truncation)
    if ckpt_dir is not None:
        ckpt_dir = Path(ckpt_dir)
        _write_meta(ckpt_dir, model_cfg, pool.registry.names)
        diff.save_tensors(ckpt_dir / "priors_init.ckpt", pool.state_dict())
    return pool


def load_init_pool(ckpt_dir) -> PriorPool:
    model_cfg, cats = read_meta(ckpt_dir)
    state = diff.load_tensors(_need(Path(ckpt_dir) / "priors_init.ckpt"))
    return PriorPool.from_state_dict(state, model_cfg.truncation, cats)


def save_stage1(ckpt_dir, model: PatchPriorModel, pool: PriorPool, tag: str = ""):
    diff.save_tensors(Path(ckpt_dir) / f"s1_{model.R}{tag}.ckpt", {**model.state_dict(), **pool.state_dict()})


def load_stage1(ckpt_dir, R: int, tag: str = ""):
    model_cfg, cats = read_meta(ckpt_dir)
    state = diff.load_tensors(_need(Path(ckpt_dir) / f"s1_{R}{tag}.ckpt"))
    model = PatchPriorModel(R, model_cfg)
    model.load_state_dict(state)
    return model, PriorPool.from_state_dict(state, model_cfg.truncation, cats)


def build_multires(ckpt_dir, seed: int = 0, mode: str = "attention", tag: str = "") -> MultiResModel:
    model_cfg, _ = read_meta(ckpt_dir)
    models, pools = {}, {}
    for R in model_cfg.resolutions:
        models[R], pools[R] = load_stage1(ckpt_dir, R, tag)
    return MultiResModel(models, pools, model_cfg, seed=seed, mode=mode)


def load_multires(ckpt_dir, mode: str = "attention", tag: str = "", finetuned: bool = True,
                  s1_tag: str | None = None) -> MultiResModel:
    """Stage-2 model ``s2{tag}`` on top of ``s1_<R>{s1_tag}`` (``s1_tag`` defaults to ``tag``)."""
    ckpt_dir = Path(ckpt_dir)
    mm = build_multires(ckpt_dir, mode=mode, tag=tag if s1_tag is None else s1_tag)
    mm.load_state_dict(diff.load_tensors(_need(ckpt_dir / f"s2{tag}.ckpt")))
    ft = ckpt_dir / f"finetune{tag}.ckpt"
    if finetuned and ft.exists():
        state = diff.load_tensors(ft)
        for R in mm.order:
            mm.models[R].input_encoder.load_state_dict(state)
    return mm


def run_stage1(records, ckpt_dir, R: int, cfg: TrainConfig, learn_priors: bool = True, tag: str = "",
               max_partials=None):
    model_cfg, _ = read_meta(ckpt_dir)
    pool = load_init_pool(ckpt_dir)
    pairs = pairs_from_manifest(records, "train", max_partials)
    model, pool, curve = train_stage1(R, pairs, pool, model_cfg, cfg, learn_priors=learn_priors,
                                      curve_path=Path(ckpt_dir) / f"curve_s1_{R}{tag}.csv")
    save_stage1(ckpt_dir, model, pool, tag)
    return model, pool, curve


def run_stage2(records, ckpt_dir, cfg: TrainConfig, mode: str = "attention", tag: str = "", s1_tag: str = "",
               max_partials=None):
    mm = build_multires(ckpt_dir, seed=cfg.seed, mode=mode, tag=s1_tag)
    pairs = pairs_from_manifest(records, "train", max_partials)
    mm, curve = train_stage2(pairs, mm, cfg, curve_path=Path(ckpt_dir) / f"curve_s2{tag}.csv")
    diff.save_tensors(Path(ckpt_dir) / f"s2{tag}.ckpt", mm.state_dict())
    return mm, curve


def run_finetune(noisy_records, ckpt_dir, cfg: TrainConfig, max_partials=None):
    mm = load_multires(ckpt_dir, finetuned=False)
    pairs = pairs_from_manifest(noisy_records, "train", max_partials)
    mm, curve = finetune_input_encoders(pairs, mm, cfg, curve_path=Path(ckpt_dir) / "curve_finetune.csv")
    state = {}
    for R in mm.order:
        state.update(mm.models[R].input_encoder.state_dict())
    diff.save_tensors(Path(ckpt_dir) / "finetune.ckpt", state)
    return mm, curve


def stage1_predictor(model: PatchPriorModel, pool: PriorPool):
    return lambda batch: predict(lambda S: model(S, pool), batch)


def multires_predictor(mm: MultiResModel):
    return lambda batch: predict(mm, batch)


ABLATION_VARIANTS = ("32-only", "8-only", "4-only", "no-attention", "fixed-priors", "full")


def ablate(records, ckpt_dir, s1_cfg: TrainConfig, s2_cfg: TrainConfig, split="test", n_points=10_000,
           seed=0, variants=ABLATION_VARIANTS, max_partials=None):
    """Evaluate the configured variants on ``split``; trains the no-attention and fixed-priors
    variants on top of the existing init priors. Returns a list of table rows."""
    ckpt_dir = Path(ckpt_dir)
    model_cfg, _ = read_meta(ckpt_dir)
    rows = []
    for name in variants:
        if name.endswith("-only"):
            R = int(name.split("-")[0])
            if R not in model_cfg.resolutions:
                raise ValueError(f"variant {name} needs resolution {R} in the model config")
            model, pool = load_stage1(ckpt_dir, R)
            pred = stage1_predictor(model, pool)
        elif name == "full":
            pred = multires_predictor(load_multires(ckpt_dir, finetuned=False))
        elif name == "no-attention":
            if not (ckpt_dir / "s2_noattn.ckpt").exists():
                run_stage2(records, ckpt_dir, s2_cfg, mode="mean", tag="_noattn", max_partials=max_partials)
            pred = multires_predictor(load_multires(ckpt_dir, mode="mean", tag="_noattn", finetuned=False,
                                                    s1_tag=""))
        elif name == "fixed-priors":
            for R in model_cfg.resolutions:
                if not (ckpt_dir / f"s1_{R}_fixed.ckpt").exists():
                    run_stage1(records, ckpt_dir, R, replace(s1_cfg, stage=f"s1_{R}"), learn_priors=False,
                               tag="_fixed", max_partials=max_partials)
            if not (ckpt_dir / "s2_fixed.ckpt").exists():
                run_stage2(records, ckpt_dir, s2_cfg, tag="_fixed", s1_tag="_fixed", max_partials=max_partials)
            pred = multires_predictor(load_multires(ckpt_dir, tag="_fixed", finetuned=False))
        else:
            raise ValueError(f"unknown ablation variant {name!r}")
        rep = evaluate(records, pred, n_points=n_points, seed=seed, split=split)
        inst, cat = rep.inst_avg(), rep.cat_avg()
        rows.append({"variant": name, "inst_cd_x100": inst["cd_x100"], "cat_cd_x100": cat["cd_x100"],
                     "inst_iou": inst["iou"], "cat_iou": cat["iou"]})
        log.info("ablation %s: %s", name, rows[-1])
    return rows


def mean_cd(report) -> float:
    return float(np.mean([r["cd_x100"] for r in report.rows]))
