"""Pipeline wiring: configuration, training runs, cross-domain reports.

A run is fully determined by (resolved config, seed, corpus bytes); the
manifest records all three plus the calibrated noise, the accounted epsilon
at completion, per-epoch losses, and artifact hashes. DP runs assert at the
end that the accounted epsilon does not exceed the target.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .accountant import PrivacySpec, account, calibrate_sigma
from .autodiff import NonFiniteError, PerExampleCaptures, backward
from .data import (DOMAINS, FlatExample, Tokenizer, build_vocab,
                   corpus_sha256, load_corpus, make_splits)
from .dp_optim import (ClipConfig, OptimState, adamw_step, clip_factors,
                       clipped_sum_from_grads, dp_adam_step, init_optim_state,
                       per_example_norms_ghost, per_example_norms_naive, privatize)
from .metrics import (ScoreReport, faithfulness, hallucination_rate, length_stats,
                      rouge_l, rouge_n, tokenize)
from .model import (CausalLM, ExampleTooLongError, ModelConfig, load_adapters,
                    load_checkpoint, pad_batch, save_adapters, save_checkpoint,
                    serialize_example, serialize_prompt)

MODES = ("nondp", "dp_ghost", "dp_pft")

# Learning rate and weight decay defaults per mode follow the published
# hyperparameter table (DP-Ghost: DP-Adam lr 2e-3 wd 0; DP-PFT: AdamW lr
# 4e-4 wd 0.01). The non-DP baseline reuses the DP-Ghost optimizer settings.
LR_DEFAULTS = {"nondp": 2e-3, "dp_ghost": 2e-3, "dp_pft": 4e-4}
WD_DEFAULTS = {"nondp": 0.0, "dp_ghost": 0.0, "dp_pft": 0.01}


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RunConfig:
    corpus: str
    train_domain: str
    out_dir: str
    mode: str = "nondp"
    target_epsilon: Optional[float] = None
    delta: Optional[float] = None
    noise_multiplier: Optional[float] = None
    clipping_norm: float = 0.1
    clip_mode: str = "ghost"
    batch_size: int = 4
    epochs: int = 20
    learning_rate: Optional[float] = None
    weight_decay: Optional[float] = None
    lora_rank: int = 8
    lora_alpha: float = 16.0
    max_vocab: int = 512
    context_length: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    tie_embeddings: bool = True
    beam_width: int = 5
    max_new_tokens: int = 32
    length_penalty: float = 1.0
    train_frac: float = 0.7
    valid_frac: float = 0.15
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.train_domain not in DOMAINS:
            raise ConfigError(f"train_domain must be one of {DOMAINS}, got {self.train_domain!r}")
        if self.mode == "nondp":
            for flag in ("target_epsilon", "delta", "noise_multiplier"):
                if getattr(self, flag) is not None:
                    raise ConfigError(f"mode nondp forbids privacy flag {flag}")
        else:
            if self.target_epsilon is None:
                raise ConfigError(f"mode {self.mode} requires target_epsilon")
            if self.noise_multiplier is not None and self.noise_multiplier <= 0:
                raise ConfigError("noise_multiplier must be positive when given")
        if self.clip_mode not in ("ghost", "naive"):
            raise ConfigError(f"clip_mode must be ghost or naive, got {self.clip_mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.learning_rate is None:
            self.learning_rate = LR_DEFAULTS[self.mode]
        if self.weight_decay is None:
            self.weight_decay = WD_DEFAULTS[self.mode]
        return self

    def model_config(self, vocab_size: int) -> ModelConfig:
        try:
            return ModelConfig(vocab_size=vocab_size,
                               context_length=self.context_length,
                               d_model=self.d_model, n_layers=self.n_layers,
                               n_heads=self.n_heads,
                               tie_embeddings=self.tie_embeddings)
        except ValueError as e:
            raise ConfigError(str(e))


def load_run_config(config_file: Optional[str], overrides: Dict) -> RunConfig:
    """Resolve a run config from an optional JSON file plus overrides.

    Flag overrides win over file values; unknown keys are rejected.
    """
    values: Dict = {}
    if config_file:
        with open(config_file, "r", encoding="utf-8") as f:
            values.update(json.load(f))
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = [k for k in ("corpus", "train_domain", "out_dir") if k not in values]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _serialize_examples(examples: Sequence[FlatExample], tokenizer: Tokenizer,
                        context_length: int) -> Tuple[List, int, int]:
    serialized = []
    skipped = 0
    truncated = 0
    for ex in examples:
        query = tokenizer.encode(ex.query)
        transcript = tokenizer.encode(ex.transcript_text)
        summary = tokenizer.encode(ex.summary)
        try:
            serialized.append(serialize_example(query, transcript, summary,
                                                context_length))
        except ExampleTooLongError:
            skipped += 1
            continue
        if len(query) + len(transcript) + len(summary) + 4 > context_length:
            truncated += 1
    return serialized, skipped, truncated


def _check_captures(model: CausalLM, captures: PerExampleCaptures) -> None:
    expected_affine, expected_explicit = model.expected_capture_names()
    got_affine = {c.name for c in captures.affine}
    missing = expected_affine - got_affine
    if missing:
        raise ConfigError(f"missing capture for affine layer(s): {sorted(missing)}")
    missing = expected_explicit - set(captures.explicit)
    if missing:
        raise ConfigError(f"missing explicit per-example grads for: {sorted(missing)}")


def train_loop(model: CausalLM, serialized: Sequence, *, mode: str,
               batch_size: int, epochs: int, seed: int,
               clip_config: Optional[ClipConfig], optim: OptimState,
               max_steps: Optional[int] = None) -> List[float]:
    """Run the configured loop; returns per-epoch mean losses.

    DP modes: per-example losses, per-example norms (ghost or naive), clip,
    privatize, optimizer step. Non-DP: batch-mean gradient, same optimizer.
    """
    params_np = {n: t.data for n, t in model.trainable_params().items()}
    optimizer_step = adamw_step if mode == "dp_pft" else dp_adam_step
    per_epoch: List[float] = []
    step = 0
    n = len(serialized)
    for epoch in range(epochs):
        order = rng.generator("shuffle", seed, epoch).permutation(n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tokens, mask = pad_batch([serialized[i] for i in idx])
            bsz = len(idx)
            try:
                if mode == "nondp":
                    losses = model.per_example_loss(tokens, mask)
                    _abort_if_diverged(losses.data, step)
                    grads = backward(losses)
                    grads = {k: g / bsz for k, g in grads.items()}
                else:
                    captures = PerExampleCaptures()
                    losses = model.per_example_loss(tokens, mask, captures)
                    _abort_if_diverged(losses.data, step)
                    if clip_config.mode == "ghost":
                        captures.recording = True
                        backward(losses, param_grads=False)
                        captures.recording = False
                        _check_captures(model, captures)
                        norms = per_example_norms_ghost(captures)
                        factors = clip_factors(norms, clip_config.clipping_norm)
                        clipped = backward(losses, seed=factors)
                    else:
                        per_ex = []
                        for i in range(bsz):
                            unit = np.zeros(bsz)
                            unit[i] = 1.0
                            per_ex.append(backward(losses, seed=unit))
                        norms = per_example_norms_naive(per_ex)
                        factors = clip_factors(norms, clip_config.clipping_norm)
                        clipped = clipped_sum_from_grads(per_ex, factors)
                    grads = privatize(clipped, clip_config, seed=seed, step=step,
                                      batch_size=bsz)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"non-finite values at step {step}: {e}")
            optimizer_step(params_np, grads, optim)
            loss_sum += float(losses.data.sum())
            seen += bsz
            step += 1
            if max_steps is not None and step >= max_steps:
                per_epoch.append(loss_sum / seen)
                return per_epoch
        per_epoch.append(loss_sum / seen)
    return per_epoch


def _abort_if_diverged(losses: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(losses)):
        raise TrainingDivergedError(f"non-finite loss at step {step}")


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _sha256_file(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class _RunLock:
    """Exclusive ownership of an output directory while a run lives."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def train(config: RunConfig) -> Tuple[str, dict]:
    """Train one model per the config; writes checkpoint + manifest."""
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    with _RunLock(config.out_dir):
        return _train_locked(config)


def _train_locked(config: RunConfig) -> Tuple[str, dict]:
    t0 = time.time()
    records = load_corpus(config.corpus)
    splits = make_splits(records, config.train_frac, config.valid_frac)
    train_examples = splits.train.get(config.train_domain, [])
    if not train_examples:
        raise ConfigError(f"no training examples for domain {config.train_domain!r}")
    tokenizer = build_vocab(train_examples, config.max_vocab)
    serialized, skipped, truncated = _serialize_examples(
        train_examples, tokenizer, config.context_length)
    if not serialized:
        raise ConfigError("every training example was skipped as too long")

    model = CausalLM(config.model_config(len(tokenizer)), seed=config.seed)
    if config.mode == "dp_pft":
        model.attach_adapters(rank=config.lora_rank, alpha=config.lora_alpha,
                              seed=config.seed)

    n_train = len(serialized)
    steps = config.epochs * math.ceil(n_train / config.batch_size)
    privacy: Optional[PrivacySpec] = None
    clip_config: Optional[ClipConfig] = None
    if config.mode != "nondp":
        delta = config.delta if config.delta is not None else 1.0 / (2 * n_train)
        q = config.batch_size / n_train
        sigma = config.noise_multiplier
        if sigma is None:
            sigma = calibrate_sigma(config.target_epsilon, delta, q, steps)
        privacy = PrivacySpec(target_epsilon=config.target_epsilon, delta=delta,
                              sample_rate=q, steps=steps, noise_multiplier=sigma,
                              clipping_norm=config.clipping_norm)
        clip_config = ClipConfig(clipping_norm=config.clipping_norm,
                                 noise_multiplier=sigma,
                                 batch_size=config.batch_size,
                                 mode=config.clip_mode)

    optim = init_optim_state({n: t.data for n, t in model.trainable_params().items()},
                             lr=config.learning_rate,
                             weight_decay=config.weight_decay)
    per_epoch = train_loop(model, serialized, mode=config.mode,
                           batch_size=config.batch_size, epochs=config.epochs,
                           seed=config.seed, clip_config=clip_config, optim=optim)

    accounted_eps = None
    accounting_order = None
    if privacy is not None:
        accounted_eps, accounting_order = account(
            privacy.noise_multiplier, privacy.sample_rate, privacy.steps,
            privacy.delta)
        if accounted_eps > config.target_epsilon:
            raise RuntimeError(
                f"accounted epsilon {accounted_eps:.6f} exceeds target "
                f"{config.target_epsilon}")

    vocab_path = os.path.join(config.out_dir, "vocab.json")
    tokenizer.save(vocab_path)
    ckpt_path = os.path.join(config.out_dir, "checkpoint.dpsc")
    save_checkpoint(ckpt_path, model, tokenizer.sha256(),
                    extra={"mode": config.mode, "train_domain": config.train_domain})
    artifacts = {"checkpoint": _sha256_file(ckpt_path),
                 "vocab": _sha256_file(vocab_path)}
    if config.mode == "dp_pft":
        adapters_path = os.path.join(config.out_dir, "adapters.dpsc")
        save_adapters(adapters_path, model)
        artifacts["adapters"] = _sha256_file(adapters_path)

    manifest = {
        "config": asdict(config),
        "seed": config.seed,
        "corpus_sha256": corpus_sha256(config.corpus),
        "n_train_examples": n_train,
        "skipped_examples": skipped,
        "truncated_examples": truncated,
        "steps": steps,
        "sample_rate": None if privacy is None else privacy.sample_rate,
        "delta": None if privacy is None else privacy.delta,
        "noise_multiplier": None if privacy is None else privacy.noise_multiplier,
        "accounted_epsilon": accounted_eps,
        "accounting_order": accounting_order,
        "per_epoch_losses": per_epoch,
        "wall_time_s": time.time() - t0,
        "artifacts": artifacts,
    }
    _atomic_write(os.path.join(config.out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return ckpt_path, manifest


def load_trained(run_dir) -> Tuple[CausalLM, Tokenizer]:
    """Load a run directory's checkpoint, adapters if present, and vocab."""
    header, model = load_checkpoint(os.path.join(run_dir, "checkpoint.dpsc"))
    vocab_path = os.path.join(run_dir, "vocab.json")
    tokenizer = Tokenizer.load(vocab_path)
    if tokenizer.sha256() != header["tokenizer_sha256"]:
        raise ConfigError(f"{vocab_path} does not match the checkpoint's tokenizer hash")
    adapters_path = os.path.join(run_dir, "adapters.dpsc")
    if os.path.exists(adapters_path):
        load_adapters(adapters_path, model)
    return model, tokenizer


# ---------------------------------------------------------------------------
# generation + evaluation
# ---------------------------------------------------------------------------

def predict_examples(model: CausalLM, tokenizer: Tokenizer,
                     examples: Sequence[FlatExample], *, beam_width: int,
                     max_new_tokens: int, length_penalty: float = 1.0
                     ) -> List[dict]:
    out = []
    for ex in examples:
        try:
            prefix = serialize_prompt(tokenizer.encode(ex.query),
                                      tokenizer.encode(ex.transcript_text),
                                      model.config.context_length, max_new_tokens)
            ids = model.generate_beam(prefix, beam_width=beam_width,
                                      max_new_tokens=max_new_tokens,
                                      length_penalty=length_penalty)
            text = tokenizer.decode(ids)
        except ExampleTooLongError:
            text = ""
        out.append({"id": ex.id, "prediction": text})
    return out


def write_jsonl(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def score_cell(predictions: Dict[str, str], test_examples: Sequence[FlatExample],
               valid_predictions: Dict[str, str],
               valid_examples: Sequence[FlatExample]) -> Dict[str, float]:
    """One report cell: ROUGE/length/hallucination on test predictions,
    faithfulness on validation predictions (leakage-minimizing split)."""
    r1, r2, rl, halluc = [], [], [], []
    pred_tokens = []
    for ex in test_examples:
        if ex.id not in predictions:
            raise ConfigError(f"missing prediction for id {ex.id!r}")
        cand = tokenize(predictions[ex.id])
        gold = tokenize(ex.summary)
        src = tokenize(ex.transcript_text)
        pred_tokens.append(cand)
        r1.append(rouge_n(cand, gold, 1).f1)
        r2.append(rouge_n(cand, gold, 2).f1)
        rl.append(rouge_l(cand, gold).f1)
        halluc.append(hallucination_rate(src, cand))
    faith = []
    for ex in valid_examples:
        if ex.id not in valid_predictions:
            raise ConfigError(f"missing validation prediction for id {ex.id!r}")
        faith.append(faithfulness(tokenize(ex.transcript_text),
                                  tokenize(valid_predictions[ex.id])).f1)
    stats = length_stats(pred_tokens)
    return {
        "rouge1": float(np.mean(r1)),
        "rouge2": float(np.mean(r2)),
        "rougeL": float(np.mean(rl)),
        "faithfulness_rougeL": float(np.mean(faith)),
        "mean_length": stats.mean,
        "hallucination_rate": float(np.mean(halluc)),
    }


# ---------------------------------------------------------------------------
# cross-domain matrix
# ---------------------------------------------------------------------------

def crossdomain(config: RunConfig, modes: Sequence[str]) -> dict:
    """Train (or reuse) one model per (mode, domain); emit the 9-cell report
    per mode, a faithfulness matrix on validation data, and length stats."""
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    records = load_corpus(config.corpus)
    splits = make_splits(records, config.train_frac, config.valid_frac)
    pred_dir = os.path.join(config.out_dir, "predictions")
    os.makedirs(pred_dir, exist_ok=True)

    outputs: dict = {"reports": {}, "faithfulness": {}, "lengths": []}
    length_rows: List[List[str]] = []
    for mode in modes:
        report = ScoreReport(domains=DOMAINS)
        for train_domain in DOMAINS:
            run_dir = os.path.join(config.out_dir, mode, train_domain)
            ckpt = os.path.join(run_dir, "checkpoint.dpsc")
            if not os.path.exists(ckpt):
                run_cfg = RunConfig(**{**asdict(config),
                                       "train_domain": train_domain,
                                       "out_dir": run_dir, "mode": mode})
                if mode == "nondp":
                    run_cfg.target_epsilon = None
                    run_cfg.delta = None
                    run_cfg.noise_multiplier = None
                run_cfg.learning_rate = None   # re-resolve per-mode defaults
                run_cfg.weight_decay = None
                train(run_cfg.validate())
            model, tokenizer = load_trained(run_dir)
            got = model.config
            want = (config.context_length, config.d_model, config.n_layers,
                    config.n_heads, config.tie_embeddings)
            if (got.context_length, got.d_model, got.n_layers, got.n_heads,
                    got.tie_embeddings) != want:
                raise ConfigError(
                    f"existing checkpoint in {run_dir} was trained with a "
                    f"different model configuration ({got}); remove it or "
                    f"choose a fresh output directory")
            mode_lengths: List[List[str]] = []
            all_pred_tokens: List[List[str]] = []
            for eval_domain in DOMAINS:
                test_ex = splits.test[eval_domain]
                valid_ex = splits.valid[eval_domain]
                test_preds = predict_examples(
                    model, tokenizer, test_ex, beam_width=config.beam_width,
                    max_new_tokens=config.max_new_tokens,
                    length_penalty=config.length_penalty)
                valid_preds = predict_examples(
                    model, tokenizer, valid_ex, beam_width=config.beam_width,
                    max_new_tokens=config.max_new_tokens,
                    length_penalty=config.length_penalty)
                write_jsonl(test_preds, os.path.join(
                    pred_dir, f"{mode}_{train_domain}_{eval_domain}_test.jsonl"))
                write_jsonl(valid_preds, os.path.join(
                    pred_dir, f"{mode}_{train_domain}_{eval_domain}_valid.jsonl"))
                cell = score_cell({p["id"]: p["prediction"] for p in test_preds},
                                  test_ex,
                                  {p["id"]: p["prediction"] for p in valid_preds},
                                  valid_ex)
                report.set_cell(train_domain, eval_domain, cell)
                outputs["faithfulness"][(mode, train_domain, eval_domain)] = \
                    cell["faithfulness_rougeL"]
                cell_tokens = [tokenize(p["prediction"]) for p in test_preds]
                all_pred_tokens.extend(cell_tokens)
                st = length_stats(cell_tokens)
                mode_lengths.append([mode, train_domain, eval_domain,
                                     str(len(cell_tokens)), f"{st.mean:.6f}",
                                     f"{st.stddev:.6f}", f"{st.mode_mass:.6f}"])
            agg = length_stats(all_pred_tokens)
            mode_lengths.append([mode, train_domain, "ALL",
                                 str(len(all_pred_tokens)), f"{agg.mean:.6f}",
                                 f"{agg.stddev:.6f}", f"{agg.mode_mass:.6f}"])
            length_rows.extend(mode_lengths)
        report_csv = os.path.join(config.out_dir, f"report_{mode}.csv")
        report.write_csv(report_csv)
        with open(os.path.join(config.out_dir, f"report_{mode}.md"), "w") as f:
            f.write(report.to_markdown(f"Cross-domain ROUGE ({mode})"))
        outputs["reports"][mode] = report

    _write_faithfulness(config.out_dir, outputs["faithfulness"], modes)
    lengths_path = os.path.join(config.out_dir, "lengths.csv")
    with open(lengths_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "train_domain", "eval_domain", "n_predictions",
                    "mean_length", "stddev", "mode_mass"])
        w.writerows(length_rows)
    outputs["lengths"] = length_rows
    return outputs


def _write_faithfulness(out_dir, matrix: Dict[Tuple[str, str, str], float],
                        modes: Sequence[str]) -> None:
    path = os.path.join(out_dir, "faithfulness.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "train_domain", "eval_domain", "faithfulness_rougeL"])
        for mode in modes:
            for t in DOMAINS:
                for e in DOMAINS:
                    w.writerow([mode, t, e, f"{matrix[(mode, t, e)]:.6f}"])
    lines = ["### Faithfulness (ROUGE-L of predictions vs input transcripts, "
             "validation split)", ""]
    header = ["train \\ eval"] + [f"{m}: {e}" for m in modes for e in DOMAINS]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for t in DOMAINS:
        row = [t] + [f"{matrix[(m, t, e)]:.3f}" for m in modes for e in DOMAINS]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    with open(os.path.join(out_dir, "faithfulness.md"), "w") as f:
        f.write("\n".join(lines))
