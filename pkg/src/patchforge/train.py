"""Sign-weighted L1 loss, Adam, and the stage-1 / stage-2 / fine-tuning loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff
from .diff import Tensor
from .grid import read_grid, sign_partition
from .net import ModelConfig, MultiResModel, PatchPriorModel
from .priors import PriorPool, freeze

log = logging.getLogger(__name__)

STAGES = ("s1_32", "s1_8", "s1_4", "s2", "finetune")
CURVE_FIELDS = ["epoch", "step", "lr", "loss", "loss_occ", "loss_empty", "loss_correct"]


class TrainingDivergedError(RuntimeError):
    pass


class FreezeViolationError(RuntimeError):
    pass


@dataclass
class LossConfig:
    w_occ: float = 3.0
    w_empty: float = 5.0
    weighted: bool = True

    def __post_init__(self):
        if self.w_occ < 0 or self.w_empty < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    epochs: int = 80
    lr_halve_epoch: int = 50
    batch_size: int = 32
    seed: int = 0
    stage: str = "s1_8"
    max_steps: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.lr0 <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("lr0, epochs and batch_size must be positive")
        if not 0 < self.lr_halve_epoch < self.epochs:
            raise ValueError("lr_halve_epoch must lie strictly inside the epoch range")
        if self.stage not in STAGES and not (self.stage.startswith("s1_") and self.stage[3:].isdigit()):
            raise ValueError(f"unknown stage {self.stage!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 if epoch < cfg.lr_halve_epoch else cfg.lr0 * 0.5


def weighted_l1(pred: Tensor, gt, cfg: LossConfig = LossConfig()):
    """Sign-partitioned L1: w_occ * spurious-occupancy + w_empty * missed-occupancy + correct-sign term.

    Each term is the masked mean scaled by the mask's share of all voxels, so the three
    terms add up to the plain L1 mean when both weights are 1. Masks come from the current
    prediction's signs and carry no gradient. Returns ``(loss, parts)`` with float parts.
    """
    gt = np.asarray(gt.values if hasattr(gt, "values") else gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    part = sign_partition(pred.data, gt)
    n = pred.data.size
    w_occ, w_empty = (cfg.w_occ, cfg.w_empty) if cfg.weighted else (1.0, 1.0)
    terms = {}
    for key, mask, w in (("occ", part.occ_wrong, w_occ), ("empty", part.empty_wrong, w_empty),
                         ("correct", part.correct, 1.0)):
        share = mask.sum() / n
        terms[key] = diff.mul(diff.l1_masked(pred, gt, mask), w * share)
    loss = diff.add(diff.add(terms["occ"], terms["empty"]), terms["correct"])
    parts = {f"loss_{k}": float(v.data) for k, v in terms.items()}
    return loss, parts


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# data -----------------------------------------------------------------------------

@dataclass
class Pair:
    sample_id: str
    category: str
    partial: np.ndarray
    gt: np.ndarray


def pairs_from_manifest(records, split: str | None = "train", max_partials: int | None = None) -> list[Pair]:
    out = []
    for r in records:
        if split is not None and r.split != split:
            continue
        gt = read_grid(r.gt_path).values
        for k, p in enumerate(r.partial_paths[:max_partials]):
            out.append(Pair(f"{r.sample_id}/{k}", r.category, read_grid(p).values, gt))
    return out


def gt_by_category(records, split: str = "train") -> dict:
    grouped = {}
    for r in records:
        if r.split == split:
            grouped.setdefault(r.category, []).append(read_grid(r.gt_path).values)
    return dict(sorted(grouped.items()))


def batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# loop -----------------------------------------------------------------------------

def _run(pairs, forward, trainable, cfg: TrainConfig, curve_path=None, after_step=None):
    if not pairs:
        raise ValueError("no training pairs")
    opt = Adam(trainable, lr=cfg.lr0)
    partial = np.stack([p.partial for p in pairs])
    gt = np.stack([p.gt for p in pairs])
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        for idx in batches(len(pairs), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            pred = forward(partial[idx])
            loss, parts = weighted_l1(pred, gt[idx], cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at step {step}")
            diff.backward(loss)
            opt.step()
            if after_step is not None:
                after_step(step)
            records.append({"epoch": epoch, "step": step, "lr": opt.lr, "loss": value, **parts})
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        log.info("epoch %d loss %.4f", epoch, records[-1]["loss"])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if curve_path is not None:
        write_curve(curve_path, records)
    return records


def write_curve(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CURVE_FIELDS})


def train_stage1(R: int, pairs, pool: PriorPool, model_cfg: ModelConfig, cfg: TrainConfig,
                 model: PatchPriorModel | None = None, learn_priors: bool = True, curve_path=None):
    """Jointly fit one resolution's encoders and its prior pool; priors are clamped to +-t after each step."""
    model = model or PatchPriorModel(R, model_cfg, seed=cfg.seed)
    if not learn_priors:
        freeze(pool)
    trainable = model.parameters() + ([] if pool.frozen else pool.tensors())

    def forward(S):
        return model(S, pool)

    def after(step):
        pool.clamp_()

    records = _run(pairs, forward, trainable, cfg, curve_path, after)
    return model, pool, records


def _audit(mmodel: MultiResModel, reference: dict, allowed=()):
    allowed_ids = {id(p) for p in allowed}
    for p in mmodel.stage1_parameters():
        if id(p) in allowed_ids:
            continue
        if p.grad is not None:
            raise FreezeViolationError(f"frozen parameter {p.name or 'prior'} received a gradient")
        if p.data.tobytes() != reference[id(p)]:
            raise FreezeViolationError(f"frozen parameter {p.name or 'prior'} changed")


def train_stage2(pairs, mmodel: MultiResModel, cfg: TrainConfig, curve_path=None):
    """Fit only the fusion/decoder weights; every stage-1 parameter and prior stays bit-identical."""
    for R in mmodel.order:
        mmodel.models[R].set_trainable(False)
        freeze(mmodel.pools[R])
    mmodel.clear_cache()
    reference = mmodel.frozen_snapshot()

    def after(step):
        _audit(mmodel, reference)

    records = _run(pairs, mmodel, mmodel.parameters(), cfg, curve_path, after)
    return mmodel, records


def finetune_input_encoders(pairs, mmodel: MultiResModel, cfg: TrainConfig, curve_path=None):
    """Adapt only the three input encoders; prior side, fusion and decoder weights stay frozen."""
    for R in mmodel.order:
        mmodel.models[R].set_trainable(False)
        mmodel.models[R].input_encoder.set_trainable(True)
        freeze(mmodel.pools[R])
    mmodel.set_trainable(False)
    mmodel.clear_cache()
    trainable = mmodel.input_encoder_parameters()
    reference = mmodel.frozen_snapshot()
    frozen_s2 = {k: v.data.tobytes() for k, v in mmodel.params.items()}

    def after(step):
        _audit(mmodel, reference, allowed=trainable)
        for k, v in mmodel.params.items():
            if v.grad is not None or v.data.tobytes() != frozen_s2[k]:
                raise FreezeViolationError(f"fusion parameter {k} changed during fine-tuning")

    records = _run(pairs, mmodel, trainable, cfg, curve_path, after)
    return mmodel, records


def predict(forward, partials, batch_size: int = 8) -> np.ndarray:
    outs = []
    with diff.no_grad():
        for i in range(0, len(partials), batch_size):
            outs.append(forward(np.asarray(partials[i:i + batch_size], dtype=np.float32)).data)
    return np.concatenate(outs)
