"""ROUGE-1/2/L, faithfulness, length statistics, hallucination rate.

Tokenization rule, fixed and documented: lowercase the text and split on
any run of non-alphanumeric characters. No stemming, no stopword removal,
single reference. Faithfulness is ROUGE-L of the prediction against the
source transcript; hallucination rate is the fraction of prediction tokens
whose type never occurs in the transcript.
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

_TOKEN_RE = re.compile(r"[a-z0-9]+")

LENGTH_BIN_WIDTH = 5


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _score(overlap: float, n_cand: int, n_ref: int) -> RougeScore:
    p = overlap / n_cand if n_cand > 0 else 0.0
    r = overlap / n_ref if n_ref > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(precision=p, recall=r, f1=f1)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap F1 for n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    return _score(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, rolling-row dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    ell = lcs_length(candidate, reference)
    return _score(ell, len(candidate), len(reference))


def faithfulness(transcript: Sequence[str], prediction: Sequence[str]) -> RougeScore:
    """ROUGE-L of the prediction against the source transcript."""
    if not transcript:
        raise ValueError("faithfulness needs a nonempty transcript")
    return rouge_l(prediction, transcript)


def hallucination_rate(transcript: Sequence[str], prediction: Sequence[str]) -> float:
    """Fraction of prediction tokens whose type is absent from the transcript."""
    if not transcript:
        raise ValueError("hallucination_rate needs a nonempty transcript")
    if not prediction:
        return 0.0
    seen = set(transcript)
    unseen = sum(1 for tok in prediction if tok not in seen)
    return unseen / len(prediction)


@dataclass(frozen=True)
class LengthStats:
    mean: float
    stddev: float
    histogram: Dict[int, int]     # bin start (width 5) -> count
    mode_mass: float              # fraction of predictions in the fullest bin


def length_stats(predictions: Sequence[Sequence[str]]) -> LengthStats:
    if len(predictions) == 0:
        raise ValueError("length_stats needs at least one prediction")
    lengths = [len(p) for p in predictions]
    n = len(lengths)
    mean = sum(lengths) / n
    var = sum((x - mean) ** 2 for x in lengths) / n
    hist: Counter = Counter((length // LENGTH_BIN_WIDTH) * LENGTH_BIN_WIDTH
                            for length in lengths)
    return LengthStats(mean=mean, stddev=var ** 0.5,
                       histogram=dict(sorted(hist.items())),
                       mode_mass=max(hist.values()) / n)


# ---------------------------------------------------------------------------
# cross-domain score report
# ---------------------------------------------------------------------------

CELL_FIELDS = ("rouge1", "rouge2", "rougeL", "faithfulness_rougeL",
               "mean_length", "hallucination_rate")
# reserved for an external embedding provider; always empty here
OPTIONAL_FIELDS = ("bertscore",)


@dataclass
class ScoreReport:
    """Scores keyed by (train_domain, eval_domain)."""
    domains: Tuple[str, ...]
    cells: Dict[Tuple[str, str], Dict[str, float]] = field(default_factory=dict)

    def set_cell(self, train_domain: str, eval_domain: str,
                 values: Dict[str, float]) -> None:
        missing = [f for f in CELL_FIELDS if f not in values]
        if missing:
            raise ValueError(f"cell missing fields {missing}")
        self.cells[(train_domain, eval_domain)] = dict(values)

    def is_complete(self) -> bool:
        return all((t, e) in self.cells
                   for t in self.domains for e in self.domains)

    def rows(self) -> List[List[str]]:
        header = ["train_domain", "eval_domain", *CELL_FIELDS, *OPTIONAL_FIELDS]
        out = [header]
        for t in self.domains:
            for e in self.domains:
                cell = self.cells.get((t, e))
                if cell is None:
                    continue
                out.append([t, e] + [f"{cell[f]:.6f}" for f in CELL_FIELDS]
                           + ["" for _ in OPTIONAL_FIELDS])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(self.rows())

    def to_markdown(self, title: str) -> str:
        """Rows are training domains, column groups are evaluation domains."""
        lines = [f"### {title}", ""]
        header = ["train \\ eval"]
        for e in self.domains:
            header += [f"{e} R-1", f"{e} R-2", f"{e} R-L"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for t in self.domains:
            row = [t]
            for e in self.domains:
                cell = self.cells.get((t, e), {})
                row += [f"{cell.get(k, float('nan')):.3f}"
                        for k in ("rouge1", "rouge2", "rougeL")]
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
        return "\n".join(lines)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned text table for CLI output."""
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(r):
        return "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)
