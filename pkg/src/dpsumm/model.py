"""Small decoder-only causal transformer with beam-search generation.

Trained from scratch on serialized (query, transcript, summary) sequences:
<q> query <x> transcript <y> summary <eos>, with the loss masked to the
summary tokens and <eos>. Pre-LN blocks, GELU MLP, learned positional
embeddings, optionally tied output head.

Training forward runs on the taped autodiff ops; generation uses a plain
numpy decode path with a per-layer KV cache (tested to match the taped
forward exactly).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .autodiff import (PerExampleCaptures, Tensor, add, affine, causal_attention,
                       cross_entropy_per_example, embed_lookup, gelu, layer_norm,
                       parameter, reshape, tied_head, transpose)
from .data import EOS_ID, Q_ID, X_ID, Y_ID
from .lora import LoraAdapter, lora_forward, make_adapter

INIT_STD = 0.02
MARKER_OVERHEAD = 4   # <q>, <x>, <y>, <eos>

CHECKPOINT_MAGIC = b"DPSMCKPT"


class ContextOverflowError(ValueError):
    pass


class ExampleTooLongError(ValueError):
    """Query plus summary cannot fit the context window at all."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.context_length < 16:
            raise ValueError(f"context_length must be >= 16, got {self.context_length}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")


# ---------------------------------------------------------------------------
# example serialization
# ---------------------------------------------------------------------------

def serialize_example(query: Sequence[int], transcript: Sequence[int],
                      summary: Sequence[int], context_length: int
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Lay out <q> query <x> transcript <y> summary <eos> within the window.

    The transcript is truncated from its tail to fit; the loss mask is 1
    exactly on summary tokens and <eos>. Raises ExampleTooLongError when the
    query and summary alone do not fit (callers count these as skips).
    """
    budget = context_length - MARKER_OVERHEAD - len(query) - len(summary)
    if budget < 0:
        raise ExampleTooLongError(
            f"query ({len(query)}) + summary ({len(summary)}) + markers exceed "
            f"context window {context_length}")
    kept = list(transcript[:budget])
    tokens = [Q_ID, *query, X_ID, *kept, Y_ID, *summary, EOS_ID]
    mask = np.zeros(len(tokens), dtype=np.int64)
    summary_start = 3 + len(query) + len(kept)
    mask[summary_start:summary_start + len(summary) + 1] = 1
    return np.asarray(tokens, dtype=np.int64), mask


def serialize_prompt(query: Sequence[int], transcript: Sequence[int],
                     context_length: int, gen_budget: int) -> np.ndarray:
    """Generation prefix <q> query <x> transcript <y>, reserving gen_budget."""
    budget = context_length - 3 - gen_budget - len(query)
    if budget < 0:
        raise ExampleTooLongError(
            f"query ({len(query)}) leaves no room for generation in window "
            f"{context_length}")
    kept = list(transcript[:budget])
    return np.asarray([Q_ID, *query, X_ID, *kept, Y_ID], dtype=np.int64)


def pad_batch(examples: Sequence[Tuple[np.ndarray, np.ndarray]]
              ) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad with <eos> (mask 0); causality keeps padding inert."""
    t_max = max(len(t) for t, _ in examples)
    tokens = np.full((len(examples), t_max), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(examples), t_max), dtype=np.int64)
    for i, (t, m) in enumerate(examples):
        tokens[i, :len(t)] = t
        mask[i, :len(m)] = m
    return tokens, mask


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class CausalLM:
    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.adapters: List[LoraAdapter] = []
        self.params: Dict[str, Tensor] = {}
        if params is None:
            self._init_params(seed)
        else:
            for name, arr in params.items():
                self.params[name] = parameter(np.array(arr), name=name)

    def _init_params(self, seed: int):
        cfg = self.config
        d, hd4 = cfg.d_model, 4 * cfg.d_model

        def normal(name, shape):
            self.params[name] = parameter(rng.normal(shape, INIT_STD, "init", seed, name),
                                          name=name)

        def const(name, shape, value):
            self.params[name] = parameter(np.full(shape, value), name=name)

        normal("tok_emb", (cfg.vocab_size, d))
        normal("pos_emb", (cfg.context_length, d))
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            const(f"{pre}.ln1.g", (d,), 1.0)
            const(f"{pre}.ln1.b", (d,), 0.0)
            for proj in ("wq", "wk", "wv", "wo"):
                normal(f"{pre}.attn.{proj}", (d, d))
                const(f"{pre}.attn.{proj[1]}b", (d,), 0.0)
            const(f"{pre}.ln2.g", (d,), 1.0)
            const(f"{pre}.ln2.b", (d,), 0.0)
            normal(f"{pre}.mlp.w1", (d, hd4))
            const(f"{pre}.mlp.b1", (hd4,), 0.0)
            normal(f"{pre}.mlp.w2", (hd4, d))
            const(f"{pre}.mlp.b2", (d,), 0.0)
        const("ln_f.g", (d,), 1.0)
        const("ln_f.b", (d,), 0.0)
        if not cfg.tie_embeddings:
            normal("lm_head", (d, cfg.vocab_size))

    # -- adapters -----------------------------------------------------------

    ADAPTED_PROJECTIONS = ("wq", "wv")

    def attach_adapters(self, rank: int = 8, alpha: float = 16.0, seed: int = 0):
        """LoRA on the attention query/value projections; base frozen."""
        if self.adapters:
            raise ValueError("adapters already attached")
        d = self.config.d_model
        for p in self.params.values():
            p.requires_grad = False
        for i in range(self.config.n_layers):
            for proj in self.ADAPTED_PROJECTIONS:
                name = f"blocks.{i}.attn.{proj}"
                self.adapters.append(make_adapter(name, d, d, rank=rank,
                                                  alpha=alpha, seed=seed))
        return self.adapters

    def trainable_params(self) -> Dict[str, Tensor]:
        out = {n: p for n, p in self.params.items() if p.requires_grad}
        for a in self.adapters:
            out.update(a.named_params())
        return {k: out[k] for k in sorted(out)}

    def expected_capture_names(self) -> Tuple[set, set]:
        """(affine, explicit) capture names a recording backward must cover.

        Trainable 2D weights (other than the embeddings, which the tied head
        shares) are captured as affine (activation, grad) pairs; embeddings
        and layer-norm parameters are captured as explicit per-example
        gradients. Affine biases ride along inside their weight's capture.
        """
        affine_names, explicit_names = set(), set()
        for n, p in self.trainable_params().items():
            if p.ndim == 2 and n not in ("tok_emb", "pos_emb"):
                affine_names.add(n)
            elif n in ("tok_emb", "pos_emb") or ".ln" in n or n.startswith("ln_f"):
                explicit_names.add(n)
        return affine_names, explicit_names

    # -- training forward ---------------------------------------------------

    def _project(self, h: Tensor, name: str, bias_name: str,
                 captures: Optional[PerExampleCaptures]) -> Tensor:
        w = self.params[name]
        b = self.params[bias_name]
        for a in self.adapters:
            if a.layer_name == name:
                return lora_forward(h, w, a, bias=b, captures=captures)
        return affine(h, w, b, name=name, captures=captures)

    def _split_heads(self, t: Tensor) -> Tensor:
        b, s, d = t.shape
        h = self.config.n_heads
        return transpose(reshape(t, (b, s, h, d // h)), (0, 2, 1, 3))

    def forward(self, tokens: np.ndarray,
                captures: Optional[PerExampleCaptures] = None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        bsz, t_len = tokens.shape
        if t_len > self.config.context_length:
            raise ContextOverflowError(
                f"sequence length {t_len} exceeds context window "
                f"{self.config.context_length}")
        p = self.params
        pos = np.tile(np.arange(t_len), (bsz, 1))
        x = add(embed_lookup(p["tok_emb"], tokens, captures),
                embed_lookup(p["pos_emb"], pos, captures))
        for i in range(self.config.n_layers):
            pre = f"blocks.{i}"
            h = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], captures=captures)
            q = self._split_heads(self._project(h, f"{pre}.attn.wq", f"{pre}.attn.qb", captures))
            k = self._split_heads(affine(h, p[f"{pre}.attn.wk"], p[f"{pre}.attn.kb"],
                                         name=f"{pre}.attn.wk", captures=captures))
            v = self._split_heads(self._project(h, f"{pre}.attn.wv", f"{pre}.attn.vb", captures))
            att = causal_attention(q, k, v)
            merged = reshape(transpose(att, (0, 2, 1, 3)), (bsz, t_len, self.config.d_model))
            x = add(x, affine(merged, p[f"{pre}.attn.wo"], p[f"{pre}.attn.ob"],
                              name=f"{pre}.attn.wo", captures=captures))
            h2 = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], captures=captures)
            m = gelu(affine(h2, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"],
                            name=f"{pre}.mlp.w1", captures=captures))
            x = add(x, affine(m, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"],
                              name=f"{pre}.mlp.w2", captures=captures))
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"], captures=captures)
        if self.config.tie_embeddings:
            return tied_head(x, p["tok_emb"], captures)
        return affine(x, p["lm_head"], name="lm_head", captures=captures)

    def per_example_loss(self, tokens: np.ndarray, loss_mask: np.ndarray,
                         captures: Optional[PerExampleCaptures] = None) -> Tensor:
        """Mean NLL per example over masked target positions."""
        tokens = np.asarray(tokens, dtype=np.int64)
        loss_mask = np.asarray(loss_mask, dtype=np.int64)
        logits = self.forward(tokens[:, :-1], captures)
        return cross_entropy_per_example(logits, tokens[:, 1:], loss_mask[:, 1:])

    # -- numpy decode path (generation) --------------------------------------

    def _np_project(self, h: np.ndarray, name: str, bias_name: str) -> np.ndarray:
        out = h @ self.params[name].data + self.params[bias_name].data
        for a in self.adapters:
            if a.layer_name == name:
                out = out + a.scaling * ((h @ a.down.data) @ a.up.data)
        return out

    @staticmethod
    def _np_layer_norm(x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return g * (x - mu) / np.sqrt(var + eps) + b

    def _decode_block(self, x: np.ndarray, i: int, cache: "DecodeCache") -> np.ndarray:
        cfg = self.config
        p = self.params
        pre = f"blocks.{i}"
        bsz, t_new, d = x.shape
        nh, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        h = self._np_layer_norm(x, p[f"{pre}.ln1.g"].data, p[f"{pre}.ln1.b"].data)
        q = self._np_project(h, f"{pre}.attn.wq", f"{pre}.attn.qb")
        k = h @ p[f"{pre}.attn.wk"].data + p[f"{pre}.attn.kb"].data
        v = self._np_project(h, f"{pre}.attn.wv", f"{pre}.attn.vb")

        def heads(t):
            return t.reshape(bsz, t_new, nh, hd).transpose(0, 2, 1, 3)

        q, k, v = heads(q), heads(k), heads(v)
        cache.k[i] = k if cache.k[i] is None else np.concatenate([cache.k[i], k], axis=2)
        cache.v[i] = v if cache.v[i] is None else np.concatenate([cache.v[i], v], axis=2)
        k_all, v_all = cache.k[i], cache.v[i]
        scores = q @ k_all.swapaxes(-1, -2) / np.sqrt(hd)
        t_total = k_all.shape[2]
        if t_new > 1:
            causal = np.triu(np.full((t_new, t_total), -1e30),
                             k=1 + (t_total - t_new))
            scores = scores + causal
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        att = (w @ v_all).transpose(0, 2, 1, 3).reshape(bsz, t_new, d)
        x = x + att @ p[f"{pre}.attn.wo"].data + p[f"{pre}.attn.ob"].data
        h2 = self._np_layer_norm(x, p[f"{pre}.ln2.g"].data, p[f"{pre}.ln2.b"].data)
        m = h2 @ p[f"{pre}.mlp.w1"].data + p[f"{pre}.mlp.b1"].data
        inner = np.sqrt(2.0 / np.pi) * (m + 0.044715 * m ** 3)
        m = 0.5 * m * (1.0 + np.tanh(inner))
        return x + m @ p[f"{pre}.mlp.w2"].data + p[f"{pre}.mlp.b2"].data

    def _decode(self, tokens: np.ndarray, cache: "DecodeCache") -> np.ndarray:
        """Append tokens [B, t_new] to the cache, return last-position logits."""
        p = self.params
        bsz, t_new = tokens.shape
        pos = np.arange(cache.length, cache.length + t_new)
        if cache.length + t_new > self.config.context_length:
            raise ContextOverflowError(
                f"decode position {cache.length + t_new} exceeds context window "
                f"{self.config.context_length}")
        x = p["tok_emb"].data[tokens] + p["pos_emb"].data[pos][None, :, :]
        for i in range(self.config.n_layers):
            x = self._decode_block(x, i, cache)
        cache.length += t_new
        x = self._np_layer_norm(x, p["ln_f.g"].data, p["ln_f.b"].data)
        head = p["tok_emb"].data.T if self.config.tie_embeddings else p["lm_head"].data
        return x[:, -1, :] @ head

    def generate_beam(self, prefix: Sequence[int], beam_width: int = 5,
                      max_new_tokens: int = 48, length_penalty: float = 1.0
                      ) -> List[int]:
        """Deterministic beam search; finalizes on <eos> or the token budget."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {beam_width}")
        if len(prefix) >= self.config.context_length:
            raise ContextOverflowError(
                f"prefix length {len(prefix)} leaves no room in context window "
                f"{self.config.context_length}")
        max_new_tokens = min(max_new_tokens, self.config.context_length - len(prefix))
        cache = DecodeCache(self.config.n_layers)
        first_logits = self._decode(prefix[None, :], cache)[0]

        def start_fn():
            return _log_softmax(first_logits)

        def advance_fn(parents, tokens):
            cache.select(np.asarray(parents))
            logits = self._decode(np.asarray(tokens, dtype=np.int64)[:, None], cache)
            return _log_softmax(logits)

        return beam_search(start_fn, advance_fn, eos_id=EOS_ID,
                           beam_width=beam_width, max_new_tokens=max_new_tokens,
                           length_penalty=length_penalty)

    def generate_greedy(self, prefix: Sequence[int], max_new_tokens: int = 48) -> List[int]:
        prefix = np.asarray(prefix, dtype=np.int64)
        if len(prefix) >= self.config.context_length:
            raise ContextOverflowError(
                f"prefix length {len(prefix)} leaves no room in context window "
                f"{self.config.context_length}")
        max_new_tokens = min(max_new_tokens, self.config.context_length - len(prefix))
        cache = DecodeCache(self.config.n_layers)
        logits = self._decode(prefix[None, :], cache)[0]
        out: List[int] = []
        for _ in range(max_new_tokens):
            nxt = int(np.argmax(logits))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            logits = self._decode(np.asarray([[nxt]], dtype=np.int64), cache)[0]
        return out


class DecodeCache:
    """Per-layer K/V arrays [B, h, t, hd]; rows follow the live beams."""

    def __init__(self, n_layers: int):
        self.k: List[Optional[np.ndarray]] = [None] * n_layers
        self.v: List[Optional[np.ndarray]] = [None] * n_layers
        self.length = 0

    def select(self, rows: np.ndarray):
        for i in range(len(self.k)):
            if self.k[i] is not None:
                self.k[i] = self.k[i][rows]
                self.v[i] = self.v[i][rows]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# beam search core (model-independent, also driven by toy tables in tests)
# ---------------------------------------------------------------------------

def beam_search(start_fn: Callable[[], np.ndarray],
                advance_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                *, eos_id: int, beam_width: int, max_new_tokens: int,
                length_penalty: float = 1.0) -> List[int]:
    """Width-limited best-first search over cumulative log-probabilities.

    start_fn() gives the log-probs after the prefix; advance_fn(parents,
    tokens) extends the chosen beams by one token each. Candidates are
    ranked by total log-prob with ties broken by token id; beams finalize on
    eos or when the budget runs out. The returned sequence excludes eos.

    Finished beams are ranked by logp / len ** (length_penalty - 1), so the
    default 1.0 ranks by the raw sum of log-probs.
    """
    if max_new_tokens < 1:
        return []
    finished: List[Tuple[float, Tuple[int, ...]]] = []

    def final_score(logp: float, length: int) -> float:
        return logp / (length ** (length_penalty - 1.0))

    live_tokens: List[Tuple[int, ...]] = [()]
    live_logps = np.zeros(1)
    step_logprobs = start_fn()[None, :]
    for step in range(max_new_tokens):
        vocab = step_logprobs.shape[1]
        totals = (live_logps[:, None] + step_logprobs).ravel()
        tok_ids = np.tile(np.arange(vocab), len(live_tokens))
        beam_ids = np.repeat(np.arange(len(live_tokens)), vocab)
        order = np.lexsort((beam_ids, tok_ids, -totals))
        new_tokens: List[Tuple[int, ...]] = []
        new_logps: List[float] = []
        new_parents: List[int] = []
        for idx in order:
            tok = int(tok_ids[idx])
            parent = int(beam_ids[idx])
            total = float(totals[idx])
            if tok == eos_id:
                seq = live_tokens[parent]
                finished.append((final_score(total, len(seq) + 1), seq))
            else:
                new_tokens.append(live_tokens[parent] + (tok,))
                new_logps.append(total)
                new_parents.append(parent)
            if len(new_tokens) == beam_width:
                break
        if not new_tokens:
            break
        live_tokens = new_tokens
        live_logps = np.asarray(new_logps)
        if step + 1 < max_new_tokens:
            step_logprobs = advance_fn(np.asarray(new_parents),
                                       np.asarray([t[-1] for t in new_tokens]))
        else:
            for seq, logp in zip(live_tokens, live_logps):
                finished.append((final_score(float(logp), len(seq)), seq))
    best = max(finished, key=lambda f: (f[0], tuple(-t for t in f[1])))
    return list(best[1])


# ---------------------------------------------------------------------------
# checkpoints: JSON header + raw little-endian float64 blocks
# ---------------------------------------------------------------------------

def _write_container(path, header: dict, arrays: Dict[str, np.ndarray]):
    names = sorted(arrays)
    manifest = []
    offset = 0
    for name in names:
        arr = arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = dict(header, params=manifest)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name in names:
            f.write(arrays[name].astype("<f8").tobytes())


def _read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays: Dict[str, np.ndarray] = {}
        for entry in header["params"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(size * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(
                entry["shape"]).copy()
    return header, arrays


def save_checkpoint(path, model: CausalLM, tokenizer_sha256: str,
                    extra: Optional[dict] = None):
    header = {
        "format": "dpsumm-checkpoint", "version": 1, "kind": "model",
        "config": asdict(model.config), "tokenizer_sha256": tokenizer_sha256,
        "extra": extra or {},
    }
    _write_container(path, header, {n: p.data for n, p in model.params.items()})


def load_checkpoint(path) -> Tuple[dict, CausalLM]:
    header, arrays = _read_container(path)
    if header.get("kind") != "model":
        raise CheckpointFormatError(f"{path}: expected a model checkpoint")
    config = ModelConfig(**header["config"])
    return header, CausalLM(config, params=arrays)


def save_adapters(path, model: CausalLM):
    """Adapters serialize separately from the base weights."""
    meta = [{"layer": a.layer_name, "rank": a.rank, "scaling": a.scaling}
            for a in model.adapters]
    arrays = {}
    for a in model.adapters:
        arrays[a.down.name] = a.down.data
        arrays[a.up.name] = a.up.data
    header = {"format": "dpsumm-checkpoint", "version": 1, "kind": "adapters",
              "adapters": meta}
    _write_container(path, header, arrays)


def load_adapters(path, model: CausalLM):
    header, arrays = _read_container(path)
    if header.get("kind") != "adapters":
        raise CheckpointFormatError(f"{path}: expected an adapter checkpoint")
    for p in model.params.values():
        p.requires_grad = False
    model.adapters = []
    for meta in header["adapters"]:
        name = meta["layer"]
        down = arrays[f"{name}.lora_down"]
        up = arrays[f"{name}.lora_up"]
        adapter = LoraAdapter(
            layer_name=name,
            down=parameter(down, name=f"{name}.lora_down"),
            up=parameter(up, name=f"{name}.lora_up"),
            rank=meta["rank"], scaling=meta["scaling"])
        model.adapters.append(adapter)
    return model.adapters
