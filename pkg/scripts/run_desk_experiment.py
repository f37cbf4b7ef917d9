#!/usr/bin/env python3
"""End-to-end desk experiment: synthesize a corpus, train non-DP and
DP-Ghost models on every domain, and emit the cross-domain reports.

Reproduces the full analysis surface at desk scale: the 9-cell ROUGE
matrix per mode, the faithfulness matrix on validation data, and the
summary-length statistics that contrast DP with non-DP generations.

    python scripts/run_desk_experiment.py --out runs/desk --target-eps 8
"""

import argparse
import os
import sys
import time

from dpsumm.data import save_corpus, synth_corpus
from dpsumm.harness import RunConfig, crossdomain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=123)
    ap.add_argument("--meetings-per-domain", type=int, default=63)
    ap.add_argument("--target-eps", type=float, default=8.0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--modes", default="nondp,dp_ghost",
                    help="comma-separated subset of nondp,dp_ghost,dp_pft")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    corpus_path = os.path.join(args.out, "synth_corpus.jsonl")
    if not os.path.exists(corpus_path):
        save_corpus(synth_corpus(args.seed, args.meetings_per_domain), corpus_path)
        print(f"wrote corpus: {corpus_path}")

    config = RunConfig(
        corpus=corpus_path, train_domain="product", out_dir=args.out,
        mode="dp_ghost", target_epsilon=args.target_eps, epochs=args.epochs,
        batch_size=4, clipping_norm=0.1, max_vocab=512, context_length=512,
        d_model=64, n_layers=2, n_heads=4, beam_width=5, max_new_tokens=28,
        seed=args.seed, train_frac=0.8, valid_frac=0.1)

    t0 = time.time()
    outputs = crossdomain(config, args.modes.split(","))
    print(f"\ncrossdomain finished in {time.time() - t0:.0f}s")
    for mode, report in outputs["reports"].items():
        print(f"  report_{mode}.csv (complete: {report.is_complete()})")
    print(f"  faithfulness.csv / lengths.csv under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
