"""``patchforge`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .config import ConfigError, RunConfig, load_config
from .datagen import generate_dataset, load_manifest, make_noisy_partial, normalize_mesh, read_obj, sample_seed
from .evaluate import evaluate
from .grid import write_grid
from .shapes import write_synthetic_meshes

log = logging.getLogger("patchforge")

STAGE_ALIASES = {"s1-32": "s1_32", "s1-8": "s1_8", "s1-4": "s1_4", "s1-2": "s1_2", "s1-16": "s1_16",
                 "s2": "s2", "finetune": "finetune"}


def _run_record(out_dir, command, cfg: RunConfig, started, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {"patchforge": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "wall_time_s": round(time.time() - started, 3),
        **(extra or {}),
    }
    (out_dir / f"run_{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _require(value, what):
    if value is None:
        raise ConfigError(f"missing {what}", what)
    return value


def cmd_synth(args, cfg):
    counts = {}
    for item in args.per_category.split(","):
        cat, n = item.split("=")
        counts[cat.strip()] = int(n)
    paths = write_synthetic_meshes(args.out, counts, seed=cfg.seed)
    return {"meshes": len(paths)}


def cmd_datagen(args, cfg):
    s = cfg.scan
    scan = replace(s, views=args.views or s.views, partial_views=args.partial_views or s.partial_views,
                   res=args.res or s.res, trunc=args.trunc or s.trunc,
                   test_categories=args.test_categories.split(",") if args.test_categories else s.test_categories)
    meshes = _require(args.meshes or cfg.paths.meshes, "paths.meshes")
    if args.noisy:
        out = _require(args.out or cfg.paths.noisy_data, "paths.noisy_data")
    else:
        out = _require(args.out or cfg.paths.data, "paths.data")
    records = generate_dataset(meshes, out, scan.scan_config(), seed=cfg.seed, test_categories=scan.test_categories)
    if args.noisy:
        _write_noisy(records, meshes, out, scan.scan_config(), cfg.seed)
    return {"samples": len(records), "out": str(out)}


def _write_noisy(records, meshes, out, scan, seed):
    """Replace each partial with a cluttered, sparsified scan of the same mesh."""
    for r in records:
        mesh = normalize_mesh(read_obj(Path(meshes) / r.category / f"{r.sample_id}.obj"))
        base = sample_seed(seed, r.sample_id)
        for k, p in enumerate(r.partial_paths):
            write_grid(Path(out) / p, make_noisy_partial(mesh, scan, seed=base + 1000 * (k + 1)))


def cmd_init_priors(args, cfg):
    records = load_manifest(_require(args.manifest or _manifest_from(cfg), "manifest"))
    ckpt = _require(args.out or cfg.paths.ckpt, "paths.ckpt")
    pool = pipeline.init_pool(records, cfg.model_config(), ckpt, cfg.model.bandwidth_scale)
    return {"priors": {c: len(pool.priors[c]) for c in pool.registry.names}}


def _manifest_from(cfg):
    return str(Path(cfg.paths.data) / "manifest.json") if cfg.paths.data else None


def cmd_train(args, cfg):
    stage = STAGE_ALIASES[args.stage]
    if stage == "finetune":
        noisy = cfg.paths.noisy_data and str(Path(cfg.paths.noisy_data) / "manifest.json")
        records = load_manifest(_require(args.manifest or noisy, "paths.noisy_data"))
    else:
        records = load_manifest(_require(args.manifest or _manifest_from(cfg), "manifest"))
    ckpt = Path(_require(args.out or cfg.paths.ckpt, "paths.ckpt"))
    tcfg = cfg.train_config(stage)
    sec = {"s2": cfg.train.s2, "finetune": cfg.train.finetune}.get(stage, cfg.train.s1)
    if stage.startswith("s1_"):
        if not (ckpt / "priors_init.ckpt").exists():
            pipeline.init_pool(records, cfg.model_config(), ckpt, cfg.model.bandwidth_scale)
        _, _, curve = pipeline.run_stage1(records, ckpt, int(stage[3:]), tcfg, max_partials=sec.max_partials)
    elif stage == "s2":
        _, curve = pipeline.run_stage2(records, ckpt, tcfg, max_partials=sec.max_partials)
    else:
        _, curve = pipeline.run_finetune(records, ckpt, tcfg, max_partials=sec.max_partials)
    return {"stage": stage, "steps": len(curve), "final_loss": curve[-1]["loss"]}


def _report_paths(out):
    out = Path(out)
    base = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    return base.with_suffix(".csv"), base.with_suffix(".json")


def cmd_evaluate(args, cfg):
    records = load_manifest(_require(args.manifest or _manifest_from(cfg), "manifest"))
    ckpt = _require(args.ckpt or cfg.paths.ckpt, "paths.ckpt")
    seed = cfg.eval.seed if args.seed is None else args.seed
    export = args.export_meshes or cfg.eval.export_meshes
    if args.gt_as_prediction:
        predictor = None
    else:
        predictor = pipeline.multires_predictor(pipeline.load_multires(ckpt))
    report = _evaluate(records, predictor, cfg, seed, export)
    csv_path, json_path = _report_paths(_require(args.out or cfg.paths.out and Path(cfg.paths.out) / "report",
                                                 "out"))
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(csv_path)
    report.write_json(json_path)
    return {"inst_avg": report.inst_avg(), "cat_avg": report.cat_avg(), "rows": len(report.rows)}


def _evaluate(records, predictor, cfg, seed, export):
    if predictor is None:
        # reference context: score every ground truth against itself
        from .evaluate import evaluate_predictions
        from .grid import read_grid
        items = []
        for r in records:
            if cfg.eval.split and r.split != cfg.eval.split:
                continue
            gt = read_grid(r.gt_path)
            items += [(f"{r.sample_id}/{k}", r.category, gt, gt) for k in range(len(r.partial_paths))]
        return evaluate_predictions(items, cfg.eval.n_points, seed, export)
    return evaluate(records, predictor, cfg.eval.n_points, seed, cfg.eval.split, export)


def cmd_ablate(args, cfg):
    records = load_manifest(_require(args.manifest or _manifest_from(cfg), "manifest"))
    ckpt = _require(args.ckpt or cfg.paths.ckpt, "paths.ckpt")
    rows = pipeline.ablate(records, ckpt, cfg.train_config("s1_8"), cfg.train_config("s2"),
                           split=cfg.eval.split, n_points=cfg.eval.n_points, seed=cfg.eval.seed,
                           variants=cfg.ablate.variants, max_partials=cfg.train.s1.max_partials)
    out = Path(_require(args.out or (cfg.paths.out and Path(cfg.paths.out) / "ablation.csv"), "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "inst_cd_x100", "cat_cd_x100", "inst_iou", "cat_iou"]
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    out.write_text("\n".join(lines) + "\n")
    return {"variants": [r["variant"] for r in rows], "table": str(out)}


def build_parser():
    p = argparse.ArgumentParser(prog="patchforge", description="Patch-prior shape completion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config JSON")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write parametric furniture meshes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-category", default="table=4,chair=4")

    sp = add("datagen", cmd_datagen, "scan meshes into complete and partial TSDF grids")
    sp.add_argument("--meshes")
    sp.add_argument("--out")
    sp.add_argument("--views", type=int)
    sp.add_argument("--partial-views", type=int)
    sp.add_argument("--res", type=int)
    sp.add_argument("--trunc", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--test-categories")
    sp.add_argument("--noisy", action="store_true", help="write cluttered, sparsified partials under paths.noisy_data")

    sp = add("init-priors", cmd_init_priors, "mean-shift prior initialization")
    sp.add_argument("--manifest")
    sp.add_argument("--out")

    sp = add("train", cmd_train, "train one stage")
    sp.add_argument("--stage", required=True, choices=sorted(STAGE_ALIASES))
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)

    sp = add("evaluate", cmd_evaluate, "Chamfer / IoU evaluation")
    sp.add_argument("--manifest")
    sp.add_argument("--ckpt")
    sp.add_argument("--out")
    sp.add_argument("--export-meshes")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--gt-as-prediction", action="store_true", help="score ground truth against itself")

    sp = add("ablate", cmd_ablate, "resolution / attention / fixed-prior ablations")
    sp.add_argument("--manifest")
    sp.add_argument("--ckpt")
    sp.add_argument("--out")
    return p


def _out_dir(args, cfg):
    # evaluate and ablate take a report path (or prefix); the run record sits beside it
    out = getattr(args, "out", None)
    if out and args.command in ("evaluate", "ablate"):
        return Path(out).parent
    for cand in (out, cfg.paths.out, cfg.paths.ckpt):
        if cand:
            path = Path(cand)
            return path.parent if path.suffix else path
    return Path(".")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        result = args.fn(args, cfg)
        _run_record(_out_dir(args, cfg), args.command, cfg, started, {"result": result})
        print(json.dumps(result, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable error
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
