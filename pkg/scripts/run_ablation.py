"""Run the whole CLI chain for one config and write the ablation table.

    python3 scripts/run_ablation.py --config configs/desk.json --per-category table=6,chair=6,stool=6,lamp=4
"""
import argparse
import sys

from patchforge.cli import main as cli
from patchforge.config import load_config


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", required=True)
    p.add_argument("--per-category", default="table=6,chair=6,stool=6,lamp=4")
    p.add_argument("--skip-data", action="store_true", help="reuse meshes and grids already on disk")
    args = p.parse_args()
    cfg = load_config(args.config)
    steps = [] if args.skip_data else [
        ["synth", "--out", cfg.paths.meshes, "--per-category", args.per_category],
        ["datagen"],
    ]
    steps += [["init-priors"]]
    steps += [["train", "--stage", f"s1-{R}"] for R in cfg.model.resolutions]
    steps += [["train", "--stage", "s2"], ["evaluate"], ["ablate"]]
    for step in steps:
        print("patchforge", " ".join(step), flush=True)
        code = cli(["-v", step[0], "--config", args.config, *step[1:]])
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
