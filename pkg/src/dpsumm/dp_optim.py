"""Per-example gradient norms, clipping, noise injection, Adam variants.

Two routes to per-example norms: the naive oracle runs one backward pass
per example and takes the full-vector L2 norm of each gradient map; the
ghost route reads the per-affine (activation, output-gradient) captures and
computes each layer's squared norm from the Frobenius inner product of the
two T x T Gram matrices, never materializing a d x p per-example weight
gradient. When T^2 exceeds d*p the Gram matrices would be the larger
object, so the per-example gradient is materialized directly instead; both
branches compute the same number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import rng
from .autodiff import PerExampleCaptures

GradMap = Dict[str, np.ndarray]

CLIP_MODES = ("naive", "ghost")


@dataclass(frozen=True)
class ClipConfig:
    clipping_norm: float
    noise_multiplier: float
    batch_size: int
    mode: str = "ghost"

    def __post_init__(self):
        if self.clipping_norm <= 0:
            raise ValueError(f"clipping_norm must be positive, got {self.clipping_norm}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in CLIP_MODES:
            raise ValueError(f"mode must be one of {CLIP_MODES}, got {self.mode!r}")


@dataclass
class OptimState:
    """Adam moments and hyperparameters for one run."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: GradMap = field(default_factory=dict)
    v: GradMap = field(default_factory=dict)


def init_optim_state(params: GradMap, lr: float, weight_decay: float = 0.0) -> OptimState:
    state = OptimState(lr=lr, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def per_example_norms_naive(per_example_grads: Sequence[GradMap]) -> np.ndarray:
    """Full-parameter-vector L2 norm of each example's gradient map."""
    if len(per_example_grads) == 0:
        raise ValueError("need at least one gradient map")
    keys = set(per_example_grads[0])
    for i, g in enumerate(per_example_grads[1:], start=1):
        if set(g) != keys:
            raise ValueError(
                f"gradient map {i} has parameter keys {sorted(set(g) ^ keys)} "
                "inconsistent with map 0")
    sq = np.zeros(len(per_example_grads))
    for i, grads in enumerate(per_example_grads):
        sq[i] = sum(float(np.sum(g * g)) for g in grads.values())
    return np.sqrt(sq)


def per_example_norms_ghost(captures: PerExampleCaptures) -> np.ndarray:
    """Per-example L2 norms from affine captures plus explicit grads."""
    if not captures.affine and not captures.explicit:
        raise ValueError("no per-example captures recorded; was capture enabled?")
    batch_sizes = {c.activations.shape[0] for c in captures.affine}
    batch_sizes |= {g.shape[0] for g in captures.explicit.values()}
    if len(batch_sizes) != 1:
        raise ValueError(f"inconsistent batch sizes across captures: {sorted(batch_sizes)}")
    bsz = batch_sizes.pop()

    sq = np.zeros(bsz)
    for cap in captures.affine:
        a, g = cap.activations, cap.out_grads
        t_len, d = a.shape[1], a.shape[2]
        p = g.shape[2]
        if t_len * t_len <= d * p:
            gram_a = a @ a.swapaxes(1, 2)
            gram_g = g @ g.swapaxes(1, 2)
            sq += (gram_a * gram_g).sum(axis=(1, 2))
        else:
            per_ex = a.swapaxes(1, 2) @ g
            sq += (per_ex * per_ex).sum(axis=(1, 2))
        if cap.has_bias:
            bias_grad = g.sum(axis=1)
            sq += (bias_grad * bias_grad).sum(axis=1)
    for grads in captures.explicit.values():
        flat = grads.reshape(bsz, -1)
        sq += (flat * flat).sum(axis=1)
    return np.sqrt(sq)


def clip_factors(norms: Sequence[float], clipping_norm: float) -> np.ndarray:
    """c_i = min(1, C / norm_i), exactly 1.0 for norms <= C (including 0)."""
    norms = np.asarray(norms, dtype=np.float64)
    if np.any(norms < 0):
        raise ValueError("norms must be nonnegative")
    out = np.ones_like(norms)
    over = norms > clipping_norm
    out[over] = clipping_norm / norms[over]
    return out


def clipped_sum_from_grads(per_example_grads: Sequence[GradMap],
                           factors: Sequence[float]) -> GradMap:
    """Sum of c_i * g_i, reduced in ascending example index."""
    out: GradMap = {}
    for grads, c in zip(per_example_grads, factors):
        for name in sorted(grads):
            if name in out:
                out[name] = out[name] + c * grads[name]
            else:
                out[name] = c * grads[name]
    return out


def gaussian_noise(shape, std: float, seed: int, step: int, name: str) -> np.ndarray:
    """Noise as a pure function of (seed, step, parameter name)."""
    return rng.normal(shape, std, "noise", seed, step, name)


def privatize(clipped_sum: GradMap, cfg: ClipConfig, seed: int, step: int,
              batch_size: Optional[int] = None) -> GradMap:
    """(clipped_sum + N(0, sigma^2 C^2 I)) / B.

    With sigma = 0 no generator is consulted and the result is exactly the
    clipped mean. `batch_size` overrides cfg.batch_size for a short final
    batch.
    """
    bsz = cfg.batch_size if batch_size is None else batch_size
    std = cfg.noise_multiplier * cfg.clipping_norm
    out: GradMap = {}
    for name in sorted(clipped_sum):
        g = clipped_sum[name]
        if std > 0:
            g = g + gaussian_noise(g.shape, std, seed, step, name)
        out[name] = g / bsz
    return out


def _adam_update(params: GradMap, grads: GradMap, state: OptimState,
                 decoupled_wd: bool) -> None:
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: {p.shape} vs {g.shape}")
        if state.weight_decay > 0 and not decoupled_wd:
            g = g + state.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay > 0 and decoupled_wd:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def dp_adam_step(params: GradMap, priv_grad: GradMap, state: OptimState) -> None:
    """Adam with bias correction on the privatized gradient (in place)."""
    _adam_update(params, priv_grad, state, decoupled_wd=False)


def adamw_step(params: GradMap, grad: GradMap, state: OptimState) -> None:
    """Adam with decoupled weight decay applied directly to the parameters."""
    _adam_update(params, grad, state, decoupled_wd=True)
