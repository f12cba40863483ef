#!/usr/bin/env python3
"""Train the small denoiser and classifier on synthetic shapes and score CDM vs CG-CDM.

    python scripts/desk_experiment.py --out results/desk
    python scripts/desk_experiment.py --unet-iters 500 --q 10   # quicker look
"""

import argparse
import logging
from dataclasses import fields

from cdmseg.experiments import DeskConfig, run_desk_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk")
    defaults = DeskConfig()
    for f in fields(DeskConfig):
        ap.add_argument("--" + f.name.replace("_", "-").lower(), dest=f.name,
                        type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = DeskConfig(**{f.name: getattr(args, f.name) for f in fields(DeskConfig)})
    res = run_desk_experiment(cfg, args.out)
    for k, v in res.dice.items():
        print(f"{k:7s} Dice {v:.3f} +- {res.dice_std[k]:.3f}")
    print(f"classifier clean accuracy {res.classifier_accuracy:.3f}; {res.cpu_seconds:.0f}s CPU")


if __name__ == "__main__":
    main()
