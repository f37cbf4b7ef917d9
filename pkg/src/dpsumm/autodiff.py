"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery to express a small causal language model: a taped
Tensor type, the op suite the model needs, and per-example capture hooks.
When a capture bag is recording, every affine op stores its per-example
input activations and output gradients (the pair ghost clipping consumes),
and non-affine parameter ops store explicit per-example gradients.

backward() can run more than once on the same graph with different seed
weights over a vector loss; the DP path uses this for its two passes
(norm pass with captures, then clipped-sum pass reweighted by the clip
factors). `param_grads=False` skips parameter-gradient work entirely, which
is all the norm pass needs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class BackwardUsageError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (generation, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 array plus the tape edge that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward=None):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"non-finite values in tensor{' ' + repr(name) if name else ''} "
                f"of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents if _grad_enabled else ()
        self._backward = _backward if _grad_enabled else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _out(data, parents, backward_fn) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(parents) if _grad_enabled else (),
                  _backward=backward_fn if _grad_enabled else None)


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Accumulate into t.grad. `fresh` marks g as a newly allocated array
    owned by the caller, which may be adopted without copying."""
    if t.grad is None:
        t.grad = g if fresh else np.array(g)
    else:
        t.grad += g


@dataclass
class AffineCapture:
    """Per-example (activations, output-gradients) pair of one affine op."""
    name: str
    activations: np.ndarray   # [B, T, d]
    out_grads: np.ndarray     # [B, T, p]
    has_bias: bool


@dataclass
class PerExampleCaptures:
    """Everything the ghost-norm computation needs from one backward pass."""
    recording: bool = False
    affine: List[AffineCapture] = field(default_factory=list)
    explicit: Dict[str, np.ndarray] = field(default_factory=dict)

    def clear(self):
        self.affine.clear()
        self.explicit.clear()

    def add_explicit(self, name: str, per_example_grad: np.ndarray):
        if name in self.explicit:
            self.explicit[name] = self.explicit[name] + per_example_grad
        else:
            self.explicit[name] = per_example_grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b. b may be a same-shaped Tensor or a constant broadcastable array."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

        def bwd(g, param_grads):
            _accum(a, g)
            _accum(b, g)

        return _out(a.data + b.data, (a, b), bwd)

    const = _as_f64(b)

    def bwd_const(g, param_grads):
        _accum(a, g)

    return _out(a.data + const, (a,), bwd_const)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g, param_grads):
        _accum(a, g * s, fresh=True)

    return _out(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; leading (batch) dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g, param_grads):
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2), fresh=True)
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g, fresh=True)

    return _out(a.data @ b.data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bwd(g, param_grads):
        _accum(a, g.reshape(orig))

    return _out(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g, param_grads):
        _accum(a, g.transpose(inv))

    return _out(a.data.transpose(axes), (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, param_grads):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - dot), fresh=True)

    return _out(s, (a,), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the GPT-2 family variant)."""
    x = a.data
    x_sq = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x_sq))
    y = 0.5 * x * (1.0 + th)
    # derivative precomputed here: backward runs twice per DP step
    half_1p_th = 0.5 * (1.0 + th)
    dx = half_1p_th + 0.5 * x * (1.0 - th * th) * (_GELU_C * (1.0 + 3 * 0.044715 * x_sq))

    def bwd(g, param_grads):
        _accum(a, g * dx, fresh=True)

    return _out(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
               captures: Optional[PerExampleCaptures] = None) -> Tensor:
    """Normalize the last axis; gain and bias are [d] parameters."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def bwd(g, param_grads):
        if gain.requires_grad or bias.requires_grad:
            if captures is not None and captures.recording:
                # per-example sums over the middle (sequence) axes
                mid = tuple(range(1, g.ndim - 1))
                if gain.requires_grad:
                    captures.add_explicit(gain.name, (g * xhat).sum(axis=mid))
                if bias.requires_grad:
                    captures.add_explicit(bias.name, g.sum(axis=mid))
            if param_grads:
                if gain.requires_grad:
                    _accum(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
                if bias.requires_grad:
                    _accum(bias, g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2), fresh=True)

    return _out(gain.data * xhat + bias.data, (x, gain, bias), bwd)


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           name: Optional[str] = None,
           captures: Optional[PerExampleCaptures] = None) -> Tensor:
    """y = x W (+ b) over [B, T, d] inputs, with per-example capture hooks."""
    if x.ndim != 3 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine shape mismatch: x {x.shape} vs W {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias shape {bias.shape} vs W {weight.shape}")
    layer_name = name or weight.name or "affine"
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, param_grads):
        if weight.requires_grad and captures is not None and captures.recording:
            captures.affine.append(AffineCapture(
                name=layer_name, activations=x.data, out_grads=g,
                has_bias=bias is not None and bias.requires_grad))
        if param_grads:
            if weight.requires_grad:
                d_in, d_out = weight.shape
                _accum(weight, x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out),
                       fresh=True)
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 1)), fresh=True)
        if x.requires_grad:
            _accum(x, g @ weight.data.T, fresh=True)

    return _out(y, parents, bwd)


def embed_lookup(table: Tensor, ids: np.ndarray,
                 captures: Optional[PerExampleCaptures] = None) -> Tensor:
    """Row lookup table[ids] for integer ids [B, T]."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise IndexError(
            f"embedding index out of range for table of {table.shape[0]} rows: "
            f"ids span [{ids.min()}, {ids.max()}]")
    # positional lookups use the same arange in every row; scatter-add is
    # then a plain slice update
    t_len = ids.shape[1]
    is_arange = bool(np.array_equal(ids, np.broadcast_to(np.arange(t_len),
                                                         ids.shape)))

    def bwd(g, param_grads):
        if not table.requires_grad:
            return
        if captures is not None and captures.recording:
            per_ex = np.zeros((ids.shape[0],) + table.shape)
            if is_arange:
                per_ex[:, :t_len] = g
            else:
                for b in range(ids.shape[0]):
                    np.add.at(per_ex[b], ids[b], g[b])
            captures.add_explicit(table.name, per_ex)
        if param_grads:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            if is_arange:
                table.grad[:t_len] += g.sum(axis=0)
            else:
                np.add.at(table.grad, ids, g)

    return _out(table.data[ids], (table,), bwd)


def tied_head(x: Tensor, table: Tensor,
              captures: Optional[PerExampleCaptures] = None) -> Tensor:
    """Output projection sharing the embedding table: logits = x @ table.T.

    The table gets gradient contributions from both the lookup and the head,
    so its per-example capture is explicit rather than a Gram pair; the sum
    of the two contributions lands in one entry keyed by the table's name.
    """
    if x.ndim != 3 or x.shape[-1] != table.shape[1]:
        raise ShapeError(f"tied_head shape mismatch: x {x.shape} vs table {table.shape}")

    def bwd(g, param_grads):
        if table.requires_grad:
            if captures is not None and captures.recording:
                captures.add_explicit(table.name, g.swapaxes(1, 2) @ x.data)
            if param_grads:
                vocab, d = table.shape
                _accum(table, g.reshape(-1, vocab).T @ x.data.reshape(-1, d),
                       fresh=True)
        if x.requires_grad:
            _accum(x, g @ table.data, fresh=True)

    return _out(x.data @ table.data.T, (x, table), bwd)


_NEG_BIG = -1e30   # finite stand-in for -inf in attention masks
_causal_masks: Dict[int, np.ndarray] = {}


def _causal_mask(t_len: int) -> np.ndarray:
    mask = _causal_masks.get(t_len)
    if mask is None:
        mask = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)
        _causal_masks[t_len] = mask
    return mask


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over [B, h, T, hd] with a causal mask.

    Position t attends to positions <= t; the strictly upper triangle of the
    score matrix is masked out. Fused into one tape node: the backward
    closure differentiates through the softmax and both products directly.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"attention expects matching [B,h,T,hd]: {q.shape}/{k.shape}/{v.shape}")
    t_len = q.shape[2]
    inv_scale = 1.0 / np.sqrt(q.shape[3])
    scores = (q.data @ k.data.swapaxes(-1, -2)) * inv_scale
    scores[:, :, _causal_mask(t_len)] = _NEG_BIG
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    weights = scores   # [B, h, T, T], zero on masked positions

    def bwd(g, param_grads):
        if v.requires_grad:
            _accum(v, weights.swapaxes(-1, -2) @ g, fresh=True)
        dw = g @ v.data.swapaxes(-1, -2)
        dscores = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
        dscores *= inv_scale
        if q.requires_grad:
            _accum(q, dscores @ k.data, fresh=True)
        if k.requires_grad:
            _accum(k, dscores.swapaxes(-1, -2) @ q.data, fresh=True)

    return _out(weights @ v.data, (q, k, v), bwd)


def cross_entropy_per_example(logits: Tensor, targets: np.ndarray,
                              mask: np.ndarray) -> Tensor:
    """Per-example mean NLL over masked positions.

    logits [B, T, V]; targets and mask [B, T]; mask entries in {0, 1}.
    Examples with an all-zero mask get loss 0 and contribute zero gradient.
    """
    targets = np.asarray(targets)
    mask = _as_f64(mask)
    bsz, t_len, vocab = logits.shape
    if targets.shape != (bsz, t_len) or mask.shape != (bsz, t_len):
        raise ShapeError(
            f"targets/mask must be {(bsz, t_len)}, got {targets.shape}/{mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("loss mask must be binary")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= vocab:
        raise IndexError(
            f"target index out of range for vocabulary of {vocab}: "
            f"targets span [{targets.min()}, {targets.max()}]")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exp_shifted = np.exp(shifted)
    z = exp_shifted.sum(axis=-1, keepdims=True)
    probs = exp_shifted / z
    b_idx = np.arange(bsz)[:, None]
    t_idx = np.arange(t_len)[None, :]
    nll = np.log(z[:, :, 0]) - shifted[b_idx, t_idx, targets]
    denom = mask.sum(axis=1)
    safe_denom = np.where(denom > 0, denom, 1.0)
    losses = (nll * mask).sum(axis=1) / safe_denom

    def bwd(g, param_grads):
        if not logits.requires_grad:
            return
        dlogits = probs.copy()
        dlogits[b_idx, t_idx, targets] -= 1.0
        weight = g[:, None] * mask / safe_denom[:, None]
        dlogits *= weight[:, :, None]
        _accum(logits, dlogits, fresh=True)

    return _out(losses, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: Optional[Sequence[float]] = None,
             param_grads: bool = True) -> Dict[str, np.ndarray]:
    """Reverse sweep from a loss (usually scalar or per-example vector).

    `seed` weights the loss components (defaults to ones); for a vector of
    per-example losses this yields the gradient of sum_i seed_i * loss_i.
    Returns the gradient map over named parameters reached by the sweep,
    keyed by parameter name in sorted order.
    """
    if not root._parents:
        raise BackwardUsageError("backward on a detached tensor (no taped ops)")
    if seed is None:
        seed_arr = np.ones_like(root.data)
    else:
        seed_arr = _as_f64(seed)
        if seed_arr.shape != root.data.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} vs root {root.data.shape}")

    order = _topo_order(root)
    for t in order:
        t.grad = None
    root.grad = seed_arr.copy()
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad, param_grads)

    named = {t.name: t.grad for t in order
             if t.requires_grad and t.name is not None and t.grad is not None
             and not t._parents}
    return {k: named[k] for k in sorted(named)}
