"""Command-line interface.

Subcommands: ingest, train, generate, evaluate, crossdomain, account, synth.
Exit codes: 0 success, 2 config error, 3 runtime failure. Tabular outputs
print as aligned text and, with --csv PATH, also as CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from typing import List, Optional

import numpy as np

from .accountant import (CalibrationError, account, calibrate_sigma,
                         compose, rdp_curve)
from .data import (DOMAINS, CorpusError, LengthProfile, load_corpus,
                   make_splits, save_corpus, synth_corpus)
from .harness import (MODES, ConfigError, TrainingDivergedError, crossdomain,
                      load_run_config, load_trained, read_jsonl, train,
                      write_jsonl)
from .lora import AdapterConfigError
from .metrics import (faithfulness, format_table, hallucination_rate,
                      length_stats, rouge_l, rouge_n, tokenize)
from .model import serialize_prompt


def _write_csv(path, headers, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(headers)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    records = load_corpus(args.corpus)
    splits = make_splits(records, args.train_frac, args.valid_frac)
    headers = ["domain", "meetings", "pairs_train", "pairs_valid", "pairs_test",
               "avg_transcript_words", "avg_summary_words"]
    rows = []
    for domain in DOMAINS:
        recs = [r for r in records if r.domain == domain]
        if not recs:
            continue
        t_words = [sum(len(u.split()) for _, u in r.turns) for r in recs]
        s_words = [len(s.split()) for r in recs for _, s in r.query_pairs]
        rows.append([domain, str(len(recs)),
                     str(len(splits.train[domain])),
                     str(len(splits.valid[domain])),
                     str(len(splits.test[domain])),
                     f"{np.mean(t_words):.1f}",
                     f"{np.mean(s_words):.1f}"])
    print(format_table(headers, rows))
    if args.csv:
        _write_csv(args.csv, headers, rows)
    return 0


def cmd_synth(args) -> int:
    profile = LengthProfile()
    if args.product_words:
        profile = LengthProfile(transcript_words={
            "product": args.product_words,
            "academic": args.product_words * 2.217,
            "committee": args.product_words * 2.291,
        }, summary_words=profile.summary_words,
            queries_per_meeting=args.queries_per_meeting)
    records = synth_corpus(args.seed, args.meetings_per_domain, profile)
    save_corpus(records, args.out)
    pairs = sum(len(r.query_pairs) for r in records)
    print(f"wrote {len(records)} meetings / {pairs} query pairs to {args.out}")
    return 0


def cmd_account(args) -> int:
    q = args.batch_size / args.dataset_size
    steps = args.epochs * math.ceil(args.dataset_size / args.batch_size)
    delta = args.delta if args.delta is not None else 1.0 / (2 * args.dataset_size)
    sigma = calibrate_sigma(args.target_eps, delta, q, steps)
    eps, best_order = account(sigma, q, steps, delta)
    curve = compose(rdp_curve(q, sigma), steps)
    print(f"sample_rate q = {q:.6g}, steps = {steps}, delta = {delta:.6g}")
    print(f"noise_multiplier sigma = {sigma:.6f}")
    print(f"accounted epsilon = {eps:.6f} at order {best_order:g} "
          f"(target {args.target_eps})")
    headers = ["order", "rdp_epsilon", "dp_epsilon_at_delta"]
    rows = []
    for alpha, rdp in zip(curve.orders, curve.epsilons):
        dp_eps = rdp + math.log(1.0 / delta) / (alpha - 1.0)
        rows.append([f"{alpha:g}", f"{rdp:.6f}", f"{dp_eps:.6f}"])
    print(format_table(headers, rows))
    if args.csv:
        _write_csv(args.csv, headers, rows)
    return 0


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in (
        "corpus", "train_domain", "out_dir", "mode", "target_epsilon", "delta",
        "noise_multiplier", "clipping_norm", "clip_mode", "batch_size", "epochs",
        "learning_rate", "weight_decay", "lora_rank", "lora_alpha", "max_vocab",
        "context_length", "d_model", "n_layers", "n_heads", "beam_width",
        "max_new_tokens", "seed")}
    config = load_run_config(args.config, overrides)
    ckpt, manifest = train(config)
    print(f"checkpoint: {ckpt}")
    print(f"per-epoch mean loss: "
          + ", ".join(f"{x:.4f}" for x in manifest["per_epoch_losses"]))
    if manifest["accounted_epsilon"] is not None:
        print(f"accounted epsilon = {manifest['accounted_epsilon']:.6f} "
              f"(sigma = {manifest['noise_multiplier']:.6f})")
    return 0


def cmd_generate(args) -> int:
    model, tokenizer = load_trained(args.run_dir)
    prompts = read_jsonl(args.prompts)
    rows = []
    for p in prompts:
        try:
            prefix = serialize_prompt(tokenizer.encode(p["query"]),
                                      tokenizer.encode(p["transcript"]),
                                      model.config.context_length,
                                      args.max_new_tokens)
            ids = model.generate_beam(prefix, beam_width=args.beam_width,
                                      max_new_tokens=args.max_new_tokens,
                                      length_penalty=args.length_penalty)
            text = tokenizer.decode(ids)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"prompt {p.get('id')!r}: {e}")
        rows.append({"id": p["id"], "prediction": text})
    write_jsonl(rows, args.out)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    preds = {r["id"]: r["prediction"] for r in read_jsonl(args.predictions)}
    gold = read_jsonl(args.gold)
    missing = [g["id"] for g in gold if g["id"] not in preds]
    if missing:
        raise ConfigError(f"missing predictions for ids: {missing[:5]}"
                          + ("..." if len(missing) > 5 else ""))
    r1, r2, rl, faith, halluc = [], [], [], [], []
    pred_tokens = []
    for g in gold:
        cand = tokenize(preds[g["id"]])
        ref = tokenize(g["summary"])
        src = tokenize(g["transcript"])
        pred_tokens.append(cand)
        r1.append(rouge_n(cand, ref, 1).f1)
        r2.append(rouge_n(cand, ref, 2).f1)
        rl.append(rouge_l(cand, ref).f1)
        faith.append(faithfulness(src, cand).f1)
        halluc.append(hallucination_rate(src, cand))
    stats = length_stats(pred_tokens)
    headers = ["metric", "value"]
    rows = [["rouge1_f1", f"{np.mean(r1):.6f}"],
            ["rouge2_f1", f"{np.mean(r2):.6f}"],
            ["rougeL_f1", f"{np.mean(rl):.6f}"],
            ["faithfulness_rougeL_f1", f"{np.mean(faith):.6f}"],
            ["hallucination_rate", f"{np.mean(halluc):.6f}"],
            ["mean_length", f"{stats.mean:.6f}"],
            ["stddev_length", f"{stats.stddev:.6f}"],
            ["mode_mass", f"{stats.mode_mass:.6f}"],
            ["n_examples", str(len(gold))]]
    print(format_table(headers, rows))
    if args.csv:
        _write_csv(args.csv, headers, rows)
    return 0


def cmd_crossdomain(args) -> int:
    modes = args.modes.split(",")
    overrides = {k: getattr(args, k) for k in (
        "corpus", "out_dir", "target_epsilon", "clipping_norm", "batch_size",
        "epochs", "max_vocab", "context_length", "d_model", "n_layers",
        "n_heads", "beam_width", "max_new_tokens", "seed")}
    overrides["train_domain"] = DOMAINS[0]   # placeholder; set per run
    dp_modes = [m for m in modes if m != "nondp"]
    overrides["mode"] = dp_modes[0] if dp_modes else "nondp"
    if overrides["mode"] == "nondp":
        overrides.pop("target_epsilon", None)
    config = load_run_config(args.config, overrides)
    out = crossdomain(config, modes)
    for mode in modes:
        print(f"report_{mode}.csv written; complete = "
              f"{out['reports'][mode].is_complete()}")
    print(f"faithfulness.csv, lengths.csv written under {config.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpsumm",
        description="Differentially private query-conditioned meeting "
                    "summarization: train, account, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus and print statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-frac", type=float, default=0.7, dest="train_frac")
    p.add_argument("--valid-frac", type=float, default=0.15, dest="valid_frac")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--meetings-per-domain", type=int, default=50,
                   dest="meetings_per_domain")
    p.add_argument("--queries-per-meeting", type=int, default=4,
                   dest="queries_per_meeting")
    p.add_argument("--product-words", type=float, default=None,
                   dest="product_words",
                   help="mean transcript words for the product domain; the other "
                        "domains scale by the real dataset's ratios")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("account", help="calibrate noise for a privacy budget")
    p.add_argument("--target-eps", type=float, required=True, dest="target_eps")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--dataset-size", type=int, required=True, dest="dataset_size")
    p.add_argument("--batch-size", type=int, default=4, dest="batch_size")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", default=None, help="JSON config file; flags win")
    p.add_argument("--corpus")
    p.add_argument("--train-domain", dest="train_domain", choices=DOMAINS)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--target-eps", type=float, dest="target_epsilon")
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float, dest="noise_multiplier")
    p.add_argument("--clipping-norm", type=float, dest="clipping_norm")
    p.add_argument("--clip-mode", dest="clip_mode", choices=("ghost", "naive"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lora-rank", type=int, dest="lora_rank")
    p.add_argument("--lora-alpha", type=float, dest="lora_alpha")
    p.add_argument("--max-vocab", type=int, dest="max_vocab")
    p.add_argument("--context-length", type=int, dest="context_length")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--beam-width", type=int, dest="beam_width")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-search predictions for prompts")
    p.add_argument("--run-dir", required=True, dest="run_dir",
                   help="directory holding checkpoint.dpsc and vocab.json")
    p.add_argument("--prompts", required=True,
                   help="JSONL with fields id, query, transcript")
    p.add_argument("--out", required=True)
    p.add_argument("--beam-width", type=int, default=5, dest="beam_width")
    p.add_argument("--max-new-tokens", type=int, default=32, dest="max_new_tokens")
    p.add_argument("--length-penalty", type=float, default=1.0,
                   dest="length_penalty")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True,
                   help="JSONL with fields id, query, transcript, summary")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossdomain", help="full train x eval domain matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--modes", default="nondp,dp_ghost")
    p.add_argument("--target-eps", type=float, dest="target_epsilon")
    p.add_argument("--clipping-norm", type=float, dest="clipping_norm")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-vocab", type=int, dest="max_vocab")
    p.add_argument("--context-length", type=int, dest="context_length")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--beam-width", type=int, dest="beam_width")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_crossdomain)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, AdapterConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CalibrationError, TrainingDivergedError, OSError, RuntimeError,
            ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
