import os

# criterion timings assume one core; BLAS threading also adds overhead at
# these shapes, so pin it before numpy loads
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dpsumm.autodiff import Tensor, backward  # noqa: E402


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def finite_diff_check(build_fn, arrays, rng, tol=1e-4, h=1e-5, max_coords=None,
                      abs_guard=1e-9):
    """Central-difference oracle for the backward pass of `build_fn`.

    build_fn(tensors) -> output Tensor; `arrays` maps input names to numpy
    arrays, every one of which is treated as differentiable. The objective
    is a fixed random weighting of the output. Returns the worst relative
    error across all checked coordinates.

    Coordinates whose analytic and numeric values agree within `abs_guard`
    count as passing: with float64 objectives of order one and h=1e-5,
    central differences carry ~1e-10 of roundoff noise, so gradients that
    small cannot be resolved relatively by any correct implementation.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k)
               for k, v in arrays.items()}
    out = build_fn(tensors)
    weights = rng.standard_normal(out.data.shape)
    grads = backward(out, seed=weights)

    def objective(current):
        t = {k: Tensor(v, requires_grad=True, name=k) for k, v in current.items()}
        return float((build_fn(t).data * weights).sum())

    worst = 0.0
    for name, base in arrays.items():
        assert name in grads, f"no gradient recorded for {name!r}"
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_idx = rng.choice(base.size, size=max_coords, replace=False)
        for i in flat_idx:
            bumped = {k: v.copy() for k, v in arrays.items()}
            flat = bumped[name].reshape(-1)
            flat[i] += h
            up = objective(bumped)
            flat[i] -= 2 * h
            down = objective(bumped)
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            if abs(analytic - numeric) <= abs_guard:
                continue
            worst = max(worst, rel_err(analytic, numeric))
    assert worst < tol, f"finite-difference mismatch {worst:.3e} >= {tol}"
    return worst


# ---------------------------------------------------------------------------
# reference beam search (independent list-based reimplementation)
# ---------------------------------------------------------------------------

def reference_beam(logprob_table, eos_id, beam_width, max_new_tokens):
    """Naive frontier replication over a {prefix_tuple: [V] logprobs} table.

    Returns (best_sequence, best_score, finalized) where finalized holds
    every complete candidate (eos or depth cap) the width-limited search
    generated. Scores are plain summed log-probs (length penalty 1.0).
    """
    live = [((), 0.0)]
    finalized = []
    for step in range(max_new_tokens):
        candidates = []
        for seq, logp in live:
            row = logprob_table[seq]
            for tok, lp in enumerate(row):
                candidates.append((seq, tok, logp + lp))
        candidates.sort(key=lambda c: (-c[2], c[1]))
        new_live = []
        for seq, tok, total in candidates:
            if tok == eos_id:
                finalized.append((seq, total))
            else:
                new_live.append((seq + (tok,), total))
            if len(new_live) == beam_width:
                break
        if not new_live:
            break
        live = new_live
        if step + 1 == max_new_tokens:
            finalized.extend(live)
    best_seq, best_score = max(finalized,
                               key=lambda f: (f[1], tuple(-t for t in f[0])))
    return list(best_seq), best_score, finalized


def reference_greedy(logprob_table, eos_id, max_new_tokens):
    """Greedy rollout scored the same way as finished beams (eos included)."""
    seq = ()
    total = 0.0
    for _ in range(max_new_tokens):
        row = logprob_table[seq]
        tok = int(np.argmax(row))
        total += row[tok]
        if tok == eos_id:
            break
        seq = seq + (tok,)
    return list(seq), total


def random_logprob_table(rng, vocab, depth):
    """Log-prob rows for every prefix up to the given depth."""
    table = {}

    def fill(prefix):
        logits = rng.standard_normal(vocab) * 2.0
        row = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        table[prefix] = row
        if len(prefix) < depth - 1:
            for tok in range(vocab):
                fill(prefix + (tok,))

    fill(())
    return table


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240817)
