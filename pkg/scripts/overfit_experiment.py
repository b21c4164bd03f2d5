"""Overfit every stage on 8 synthetic shapes and compare against the 32^3-only model.

    python3 scripts/overfit_experiment.py --work /tmp/overfit
"""
import argparse
import json
import logging
import tempfile

from patchforge.experiments import OverfitConfig, run_overfit


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--work", help="working directory (default: a temporary one)")
    p.add_argument("--s1-steps", type=int, default=500)
    p.add_argument("--s2-steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = OverfitConfig(s1_steps=args.s1_steps, s2_steps=args.s2_steps, seed=args.seed)
    work = args.work or tempfile.mkdtemp(prefix="overfit_")
    result = run_overfit(work, cfg)
    print(json.dumps(result, indent=2, default=str))
    print(f"stage-1 R=8 final loss {result['s1_loss'][8]:.4f} (target < {0.05 * 2.5})")
    print(f"mean CD x100: full {result['cd_x100']['full']:.3f} vs 32-only {result['cd_x100']['32-only']:.3f}")


if __name__ == "__main__":
    main()
