"""Greedy and nucleus decoding with an incremental KV cache.

All tie-breaks are by lowest token id, and nucleus sampling is a pure
function of its seed, so every decode is reproducible. The batched
extraction decoder runs the greedy continuation of *every* prefix of a
sequence in one synchronized pass; it is what makes per-epoch
extraction-likelihood evaluation affordable.
"""

from __future__ import annotations

import math

import numpy as np

from .corpus import TokenSeq
from .errors import InvalidInput, SequenceTooLong, SequenceTooShort
from .model import ModelParams, _layernorm, _gelu, _log_softmax, token_array

__all__ = ["greedy_decode", "top_p_sample", "greedy_extraction_matrix"]


class _DecodeState:
    """Per-layer key/value caches for n_rows sequences decoded in lockstep."""

    def __init__(self, params: ModelParams, n_rows: int, total_len: int):
        cfg = params.cfg
        if total_len > cfg.context_len:
            raise SequenceTooLong(
                f"decode of length {total_len} exceeds context {cfg.context_len}")
        self.cfg = cfg
        self.P = {k: np.asarray(v, dtype=np.float64) for k, v in params.tensors.items()}
        self.k_cache = [np.zeros((n_rows, total_len, cfg.n_heads, cfg.head_dim))
                        for _ in range(cfg.n_layers)]
        self.v_cache = [np.zeros_like(k) for k in self.k_cache]
        self.scale = 1.0 / math.sqrt(cfg.head_dim)

    def step(self, tokens: np.ndarray, pos: int) -> np.ndarray:
        """Feed one token per row at position pos; returns logits [rows, V]."""
        cfg, P = self.cfg, self.P
        rows = tokens.shape[0]
        h = P["tok_emb"][tokens] + P["pos_emb"][pos]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a, _, _ = _layernorm(h, P[p + "ln1_g"], P[p + "ln1_b"])
            qh = (a @ P[p + "wq"]).reshape(rows, cfg.n_heads, cfg.head_dim)
            self.k_cache[i][:, pos] = (a @ P[p + "wk"]).reshape(rows, cfg.n_heads, cfg.head_dim)
            self.v_cache[i][:, pos] = (a @ P[p + "wv"]).reshape(rows, cfg.n_heads, cfg.head_dim)
            keys = self.k_cache[i][:, : pos + 1]
            vals = self.v_cache[i][:, : pos + 1]
            s = np.einsum("rhd,rjhd->rhj", qh, keys) * self.scale
            s -= s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            attn = e / e.sum(axis=-1, keepdims=True)
            oh = np.einsum("rhj,rjhd->rhd", attn, vals)
            h = h + oh.reshape(rows, cfg.embed_dim) @ P[p + "wo"]
            b, _, _ = _layernorm(h, P[p + "ln2_g"], P[p + "ln2_b"])
            h = h + _gelu(b @ P[p + "w1"]) @ P[p + "w2"]
        f, _, _ = _layernorm(h, P["lnf_g"], P["lnf_b"])
        return f @ P["tok_emb"].T


def _check_decode_args(params: ModelParams, prefix, n_new: int) -> np.ndarray:
    tokens = token_array(prefix)
    if tokens.shape[0] < 1:
        raise SequenceTooShort("decoding needs a non-empty prefix")
    if n_new < 0:
        raise InvalidInput("n_new must be >= 0")
    if tokens.shape[0] + n_new > params.cfg.context_len:
        raise SequenceTooLong(
            f"prefix {tokens.shape[0]} + {n_new} new tokens exceeds "
            f"context {params.cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.cfg.vocab_size):
        raise InvalidInput("token id outside [0, vocab_size)")
    return tokens


def _package(prefix, tokens: np.ndarray, tag: str):
    """Return the same kind the caller passed in (TokenSeq or array)."""
    if isinstance(prefix, TokenSeq):
        return TokenSeq(tokens=tuple(int(t) for t in tokens),
                        id=f"{prefix.id}:{tag}", split="generated")
    return tokens


def greedy_decode(params: ModelParams, prefix, n_new: int):
    """Append n_new argmax tokens (ties to the lowest id)."""
    tokens = _check_decode_args(params, prefix, n_new)
    if n_new == 0:
        return _package(prefix, tokens.copy(), "greedy0")
    state = _DecodeState(params, 1, tokens.shape[0] + n_new)
    out = np.empty(tokens.shape[0] + n_new, dtype=np.int64)
    out[: tokens.shape[0]] = tokens
    logits = None
    for pos in range(tokens.shape[0]):
        logits = state.step(out[pos: pos + 1], pos)
    for j in range(n_new):
        pos = tokens.shape[0] + j
        out[pos] = int(np.argmax(logits[0]))
        if j + 1 < n_new:
            logits = state.step(out[pos: pos + 1], pos)
    return _package(prefix, out, f"greedy{n_new}")


def nucleus(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with cumulative mass >= p.

    Returns (token ids, renormalized probabilities); ties sort by
    ascending id via the stable sort.
    """
    if not 0.0 < p <= 1.0:
        raise InvalidInput("top-p threshold must be in (0, 1]")
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    cum = np.cumsum(sorted_p)
    k = int(np.searchsorted(cum, p, side="left"))
    k = min(k, probs.shape[0] - 1)
    chosen = sorted_p[: k + 1]
    return order[: k + 1], chosen / chosen.sum()


def top_p_sample(params: ModelParams, prefix, n_new: int, p: float, seed: int):
    """Nucleus sampling; deterministic given (params, prefix, p, seed)."""
    if not 0.0 < p <= 1.0:
        raise InvalidInput("top-p threshold must be in (0, 1]")
    tokens = _check_decode_args(params, prefix, n_new)
    if n_new == 0:
        return _package(prefix, tokens.copy(), "topp0")
    rng = np.random.default_rng(seed)
    state = _DecodeState(params, 1, tokens.shape[0] + n_new)
    out = np.empty(tokens.shape[0] + n_new, dtype=np.int64)
    out[: tokens.shape[0]] = tokens
    logits = None
    for pos in range(tokens.shape[0]):
        logits = state.step(out[pos: pos + 1], pos)
    for j in range(n_new):
        probs = np.exp(_log_softmax(logits[0]))
        ids, weights = nucleus(probs, p)
        u = rng.random()
        idx = min(int(np.searchsorted(np.cumsum(weights), u, side="right")),
                  ids.shape[0] - 1)
        pos = tokens.shape[0] + j
        out[pos] = int(ids[idx])
        if j + 1 < n_new:
            logits = state.step(out[pos: pos + 1], pos)
    return _package(prefix, out, f"topp{n_new}")


def greedy_extraction_matrix(params: ModelParams, x) -> np.ndarray:
    """Greedy continuations of every prefix of x, decoded in one pass.

    Row r holds the prefix x[:r+1] followed by its greedy continuation out
    to the full sequence length, so row r equals
    greedy_decode(params, x[:r+1], T-r-1) up to floating-point tie noise.
    All rows share each decode step: at position j+1, rows whose prefix
    covers that position take the true token, the rest take their argmax.
    """
    tokens = token_array(x)
    T = tokens.shape[0]
    if T < 2:
        raise SequenceTooShort("extraction matrix needs at least 2 tokens")
    if T > params.cfg.context_len:
        raise SequenceTooLong(f"sequence of length {T} exceeds context")
    n_rows = T - 1
    state = _DecodeState(params, n_rows, T)
    G = np.empty((n_rows, T), dtype=np.int64)
    G[:, 0] = tokens[0]
    row_ids = np.arange(n_rows)
    cur = G[:, 0].copy()
    for j in range(T - 1):
        logits = state.step(cur, j)
        nxt = np.argmax(logits, axis=-1)
        cur = np.where(row_ids > j, tokens[j + 1], nxt)
        G[:, j + 1] = cur
    return G
