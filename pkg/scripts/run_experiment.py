"""Desk-scale end-to-end experiment (acceptance criterion 7).

    python3 scripts/run_experiment.py --out runs/desk [--seed 0] [--workers 1]

Writes models, per-slide detections, F1-vs-threshold curves and report.txt
into --out.
"""

import argparse
import logging
import sys
from dataclasses import replace

from mitodet.experiment import ExperimentConfig, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--epochs", type=int, help="override training epochs (members, easy net, student)")
    ap.add_argument("--steps", type=int, help="override steps per epoch (easy net and members)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = replace(ExperimentConfig(), seed=args.seed, workers=args.workers)
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    if args.steps:
        cfg = replace(cfg, steps_per_epoch=args.steps)
    res = run_experiment(cfg, args.out)
    sys.stdout.write(res.to_text())
    return 0 if all(res.checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
