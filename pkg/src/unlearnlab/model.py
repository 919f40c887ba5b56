"""Tiny pre-norm decoder-only transformer with exact analytic gradients.

Parameters live in a flat name -> array dict (fixed order, see
param_shapes) so the optimizer, gradient checks, and the binary
checkpoint format all walk the same list. Parameters are stored in
float32 by default; all forward/backward arithmetic runs in float64,
which keeps finite-difference checks clean at either storage precision.

Prediction convention: row t of the output (t = 0..T-2, zero-based)
is the log next-token distribution given tokens[0..t], i.e. the
prediction for tokens[t+1]. The first token is never predicted.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenSeq
from .errors import (
    CheckpointError,
    InvalidInput,
    NumericalError,
    SequenceTooLong,
    SequenceTooShort,
)

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

CHECKPOINT_MAGIC = b"POPCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor for the tiny causal LM."""

    vocab_size: int = 256
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    mlp_mult: int = 4

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "n_layers", "n_heads", "context_len", "mlp_mult"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"ModelConfig.{name} must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise InvalidInput("embed_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "mlp_mult": self.mlp_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: int(d[k]) for k in (
            "vocab_size", "embed_dim", "n_layers", "n_heads", "context_len", "mlp_mult")})


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in the fixed checkpoint order."""
    d, m = cfg.embed_dim, cfg.mlp_mult * cfg.embed_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.context_len, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "wk", (d, d)),
            (p + "wv", (d, d)), (p + "wo", (d, d)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w1", (d, m)), (p + "w2", (m, d)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return shapes


@dataclass
class ModelParams:
    """All trainable tensors plus the architecture descriptor."""

    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["tok_emb"].dtype

    def copy(self) -> ModelParams:
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def validate(self) -> None:
        expected = dict(param_shapes(self.cfg))
        if set(self.tensors) != set(expected):
            raise InvalidInput("parameter names do not match the architecture")
        for name, arr in self.tensors.items():
            if arr.shape != expected[name]:
                raise InvalidInput(f"{name}: shape {arr.shape} != expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"{name} contains non-finite entries")


GradAccum = dict[str, np.ndarray]


def zero_grads(cfg: ModelConfig, dtype=np.float64) -> GradAccum:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg)}


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seeded init: N(0, 0.02) weights, unit norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif base.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Input plumbing
# ---------------------------------------------------------------------------

def token_array(x: TokenSeq | list[int] | tuple[int, ...] | np.ndarray) -> np.ndarray:
    arr = x.array() if isinstance(x, TokenSeq) else np.asarray(x, dtype=np.int64)
    if arr.ndim != 1:
        raise InvalidInput("token input must be one-dimensional")
    return arr


def _check_seq(cfg: ModelConfig, tokens: np.ndarray, min_len: int = 2) -> None:
    if tokens.shape[0] < min_len:
        raise SequenceTooShort(f"sequence of length {tokens.shape[0]}; need >= {min_len}")
    if tokens.shape[0] > cfg.context_len:
        raise SequenceTooLong(
            f"sequence of length {tokens.shape[0]} exceeds context {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InvalidInput("token id outside [0, vocab_size)")


def pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with zeros; returns (tokens [B,T], lengths [B])."""
    lens = np.asarray([s.shape[0] for s in seqs], dtype=np.int64)
    out = np.zeros((len(seqs), int(lens.max())), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lens


# ---------------------------------------------------------------------------
# Forward / backward core (batched, float64 internally)
# ---------------------------------------------------------------------------

def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + _GELU_A * u ** 3)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (u + _GELU_A * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * u ** 2)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, xhat, inv


def _layernorm_backward(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, g: np.ndarray):
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _forward_batch(params: ModelParams, tokens: np.ndarray, want_cache: bool):
    """Full teacher-forced forward pass. Returns (logits [B,T,V], cache)."""
    cfg = params.cfg
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.tensors.items()}
    B, T = tokens.shape
    scale = 1.0 / math.sqrt(cfg.head_dim)
    causal = np.tril(np.ones((T, T), dtype=bool))

    h = P["tok_emb"][tokens] + P["pos_emb"][:T][None, :, :]
    cache: dict = {"P": P, "tokens": tokens, "layers": []}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        lc: dict = {"h_in": h}
        a, lc["xhat1"], lc["inv1"] = _layernorm(h, P[p + "ln1_g"], P[p + "ln1_b"])
        lc["a"] = a
        qh = _split_heads(a @ P[p + "wq"], cfg.n_heads)
        kh = _split_heads(a @ P[p + "wk"], cfg.n_heads)
        vh = _split_heads(a @ P[p + "wv"], cfg.n_heads)
        s = np.where(causal, qh @ kh.transpose(0, 1, 3, 2) * scale, -np.inf)
        s_max = s.max(axis=-1, keepdims=True)
        e = np.exp(s - s_max)
        attn = e / e.sum(axis=-1, keepdims=True)
        oh = attn @ vh
        o = _merge_heads(oh)
        h = h + o @ P[p + "wo"]
        lc.update(qh=qh, kh=kh, vh=vh, attn=attn, o=o)

        lc["h_mid"] = h
        bmlp, lc["xhat2"], lc["inv2"] = _layernorm(h, P[p + "ln2_g"], P[p + "ln2_b"])
        lc["bmlp"] = bmlp
        u = bmlp @ P[p + "w1"]
        z = _gelu(u)
        h = h + z @ P[p + "w2"]
        lc.update(u=u, z=z)
        cache["layers"].append(lc if want_cache else None)

    f, xhat_f, inv_f = _layernorm(h, P["lnf_g"], P["lnf_b"])
    logits = f @ P["tok_emb"].T
    if want_cache:
        cache.update(f=f, xhat_f=xhat_f, inv_f=inv_f)
    return logits, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _backward_batch(params: ModelParams, spec: np.ndarray, cache: dict) -> tuple[float, GradAccum]:
    """Gradients of loss = sum_{b,t} -<spec[b,t], logprobs[b,t]>."""
    cfg = params.cfg
    P = cache["P"]
    tokens = cache["tokens"]
    B, T = tokens.shape
    scale = 1.0 / math.sqrt(cfg.head_dim)

    logits = cache["f"] @ P["tok_emb"].T
    logprobs = _log_softmax(logits[:, : T - 1])
    probs = np.exp(logprobs)
    loss = float(-(spec * logprobs).sum())

    grads = zero_grads(cfg)
    dlogits = np.zeros_like(logits)
    dlogits[:, : T - 1] = -(spec - probs * spec.sum(axis=-1, keepdims=True))

    f = cache["f"]
    grads["tok_emb"] += np.einsum("btv,btd->vd", dlogits, f)
    dF = dlogits @ P["tok_emb"]
    dh, dg, db = _layernorm_backward(dF, cache["xhat_f"], cache["inv_f"], P["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]

        # MLP block: h = h_mid + gelu(LN2(h_mid) @ w1) @ w2
        dz = dh @ P[p + "w2"].T
        grads[p + "w2"] += np.einsum("btm,btd->md", lc["z"], dh)
        du = dz * _gelu_grad(lc["u"])
        grads[p + "w1"] += np.einsum("btd,btm->dm", lc["bmlp"], du)
        dbmlp = du @ P[p + "w1"].T
        dx2, dg2, db2 = _layernorm_backward(dbmlp, lc["xhat2"], lc["inv2"], P[p + "ln2_g"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dh = dh + dx2

        # attention block: h_mid = h_in + merge(attn @ vh) @ wo
        do = dh @ P[p + "wo"].T
        grads[p + "wo"] += np.einsum("btd,bte->de", lc["o"], dh)
        doh = _split_heads(do, cfg.n_heads)
        attn, qh, kh, vh = lc["attn"], lc["qh"], lc["kh"], lc["vh"]
        dattn = doh @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ doh
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds *= scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 1, 3, 2) @ qh
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        a = lc["a"]
        grads[p + "wq"] += np.einsum("btd,bte->de", a, dq)
        grads[p + "wk"] += np.einsum("btd,bte->de", a, dk)
        grads[p + "wv"] += np.einsum("btd,bte->de", a, dv)
        da = dq @ P[p + "wq"].T + dk @ P[p + "wk"].T + dv @ P[p + "wv"].T
        dx1, dg1, db1 = _layernorm_backward(da, lc["xhat1"], lc["inv1"], P[p + "ln1_g"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dh = dh + dx1

    np.add.at(grads["tok_emb"], tokens.reshape(-1), dh.reshape(-1, cfg.embed_dim))
    grads["pos_emb"][:T] += dh.sum(axis=0)
    return loss, grads


def batch_backward(params: ModelParams, seqs: list[np.ndarray],
                   specs: list[np.ndarray]) -> tuple[float, GradAccum]:
    """Loss and gradients for a padded batch of per-sequence target specs.

    Each spec is a [len(seq)-1, V] weight matrix; rows beyond a sequence's
    predicted positions are implicit zeros, so padding never leaks into
    the loss or the gradients.
    """
    if not seqs:
        raise InvalidInput("empty batch")
    tokens, lens = pad_batch(seqs)
    B, T = tokens.shape
    spec = np.zeros((B, T - 1, params.cfg.vocab_size), dtype=np.float64)
    for i, (s, w) in enumerate(zip(seqs, specs)):
        if not np.all(np.isfinite(w)):
            raise InvalidInput("loss spec contains non-finite weights")
        if w.shape != (s.shape[0] - 1, params.cfg.vocab_size):
            raise InvalidInput(f"loss spec shape {w.shape} does not match sequence")
        spec[i, : s.shape[0] - 1] = w
        _check_seq(params.cfg, s)
    _, cache = _forward_batch(params, tokens, want_cache=True)
    return _backward_batch(params, spec, cache)


# ---------------------------------------------------------------------------
# Public single-sequence operations
# ---------------------------------------------------------------------------

def forward_logprobs(params: ModelParams, x) -> np.ndarray:
    """Log next-token distributions, shape [T-1, V]; rows logsumexp to 0."""
    tokens = token_array(x)
    _check_seq(params.cfg, tokens)
    logits, _ = _forward_batch(params, tokens[None, :], want_cache=False)
    return _log_softmax(logits[0, :-1])


def forward_probs(params: ModelParams, x) -> np.ndarray:
    """Next-token probability rows, shape [T-1, V]."""
    return np.exp(forward_logprobs(params, x))


def seq_logprob(params: ModelParams, x) -> float:
    """Total log-probability of the sequence under teacher forcing."""
    tokens = token_array(x)
    lp = forward_logprobs(params, tokens)
    return float(lp[np.arange(tokens.shape[0] - 1), tokens[1:]].sum())


def onehot_spec(tokens: np.ndarray, vocab_size: int, weight: float = 1.0) -> np.ndarray:
    """One-hot target rows for the true next tokens, scaled by weight."""
    n = tokens.shape[0] - 1
    spec = np.zeros((n, vocab_size), dtype=np.float64)
    spec[np.arange(n), tokens[1:]] = weight
    return spec


def backward(params: ModelParams, x, loss_spec: np.ndarray) -> tuple[float, GradAccum]:
    """Loss and exact gradients for one sequence under a target-weight spec."""
    tokens = token_array(x)
    spec = np.asarray(loss_spec, dtype=np.float64)
    return batch_backward(params, [tokens], [spec])


# ---------------------------------------------------------------------------
# Checkpoint format: magic, length-prefixed config JSON, f32 tensors in
# param_shapes order, then a 0/1 optimizer flag (state follows if 1).
# ---------------------------------------------------------------------------

def _opt_state_blob(state) -> bytes:
    parts = [struct.pack("<Q", state.step),
             struct.pack("<4d", state.lr, state.beta1, state.beta2, state.eps)]
    for name, _ in param_shapes(state.cfg):
        parts.append(np.ascontiguousarray(state.m[name], dtype="<f4").tobytes())
    for name, _ in param_shapes(state.cfg):
        parts.append(np.ascontiguousarray(state.v[name], dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, params: ModelParams, opt_state=None) -> None:
    """Write the binary checkpoint atomically (temp file + rename)."""
    from .ioutil import atomic_write_bytes

    cfg_json = json.dumps(params.cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg_json)), cfg_json]
    for name, _ in param_shapes(params.cfg):
        parts.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    if opt_state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(_opt_state_blob(opt_state))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (params, opt_state_or_None)."""
    from .optim import OptimizerState

    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint of this format")
    off = len(CHECKPOINT_MAGIC)
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        cfg = ModelConfig.from_dict(json.loads(data[off: off + cfg_len].decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad config header ({exc})") from exc
    off += cfg_len

    shapes = param_shapes(cfg)
    n_param_bytes = sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(data) < off + n_param_bytes + 1:
        raise CheckpointError(f"{path}: truncated parameter block")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(data[off: off + n], dtype="<f4").reshape(shape).copy()
        off += n
    params = ModelParams(cfg, tensors)
    params.validate()

    flag = data[off]
    off += 1
    if flag == 0:
        if off != len(data):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
        return params, None
    if flag != 1:
        raise CheckpointError(f"{path}: bad optimizer flag {flag}")
    expected = off + 8 + 32 + 2 * n_param_bytes
    if len(data) != expected:
        raise CheckpointError(f"{path}: optimizer block has wrong length")
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8
    lr, beta1, beta2, eps = struct.unpack_from("<4d", data, off)
    off += 32
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for target in (m, v):
        for name, shape in shapes:
            n = int(np.prod(shape)) * 4
            target[name] = np.frombuffer(data[off: off + n], dtype="<f4").reshape(shape).copy()
            off += n
    state = OptimizerState(cfg=cfg, m=m, v=v, step=int(step), lr=lr,
                           beta1=beta1, beta2=beta2, eps=eps)
    return params, state
