#!/usr/bin/env python3
"""Sweep one saliency hyperparameter on the Gaussian-block benchmark with exact models.

Uses the CLI pipeline end to end: generate, write analytic checkpoints,
then ``ablate``. The CSV and plot land in ``--out``.

    python scripts/analytic_sweep.py --axis s --values 0,1,10,100 --method cg-diff
"""

import argparse
import sys
from pathlib import Path

from cdmseg import cli

CONFIG = """\
dataset = gaussian_blocks
n_images = {n}
image_size = 16
test_fraction = 0.5
sigma = {sigma}
T = 100
beta_start = 0.001
beta_end = 0.2
q_noise_level = 40
r_steps = 4
protocol_repeats = 4
analytic = true
seed = {seed}
"""


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", default="s", choices=["Q", "R", "tau", "s"])
    ap.add_argument("--values", default="0,1,10,100")
    ap.add_argument("--method", default="cg-cdm")
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/analytic_sweep")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "sweep.cfg"
    cfg.write_text(CONFIG.format(n=args.n, sigma=args.sigma, seed=args.seed))
    for verb in ("generate", "train", "classify-train"):
        if cli.main([verb, "--config", str(cfg), "--out", str(out)]):
            return 1
    code = cli.main(["ablate", "--config", str(cfg), "--out", str(out), "--method", args.method,
                     "--axis", args.axis, "--values", args.values])
    if code == 0:
        print((out / f"ablation_{args.axis}.csv").read_text(), end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
