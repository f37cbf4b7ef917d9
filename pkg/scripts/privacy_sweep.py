#!/usr/bin/env python3
"""Noise-calibration sweep: sigma and the minimizing RDP order for a grid
of privacy targets and dataset sizes. Useful for planning runs before
training anything.

    python scripts/privacy_sweep.py --dataset-sizes 200,690 --targets 3,8
"""

import argparse
import math
import sys

from dpsumm.accountant import account, calibrate_sigma
from dpsumm.metrics import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset-sizes", default="200,690")
    ap.add_argument("--targets", default="3,8")
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    rows = []
    for n in (int(x) for x in args.dataset_sizes.split(",")):
        q = args.batch_size / n
        steps = args.epochs * math.ceil(n / args.batch_size)
        delta = 1.0 / (2 * n)
        for target in (float(x) for x in args.targets.split(",")):
            sigma = calibrate_sigma(target, delta, q, steps)
            eps, order = account(sigma, q, steps, delta)
            rows.append([str(n), f"{target:g}", f"{delta:.3e}", str(steps),
                         f"{sigma:.4f}", f"{eps:.4f}", f"{order:g}"])
    print(format_table(
        ["dataset", "target_eps", "delta", "steps", "sigma", "eps", "order"],
        rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
