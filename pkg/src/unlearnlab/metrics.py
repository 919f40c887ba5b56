"""Memorization and privacy metrics: MA, RMA, extraction likelihood,
n-gram overlap, sentence BLEU, character F-score, and stop thresholds.

Every metric accepts either ModelParams or any object exposing
``vocab_size`` and ``next_dist(prefix) -> probability vector`` (and
optionally ``seq_dists(tokens)``), so tests can inject lookup-table
models with hand-set distributions.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import InvalidInput, SequenceTooShort
from .model import ModelParams, forward_probs, token_array
from .sampling import greedy_extraction_matrix

DEFAULT_EL_ORDER = 4   # desk-scale default; 10 matches the reference setup
REFERENCE_EL_ORDER = 10


@dataclass
class MetricTriple:
    el: float
    ma: float
    rma: float
    el_n: int

    def as_dict(self) -> dict:
        return {"el": self.el, "ma": self.ma, "rma": self.rma, "el_n": self.el_n}


@dataclass
class ForgettingThresholds:
    el: float
    ma: float
    rma: float
    el_n: int
    source: str = "heldout"

    def as_dict(self) -> dict:
        return {"el": self.el, "ma": self.ma, "rma": self.rma,
                "n": self.el_n, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> ForgettingThresholds:
        return cls(el=float(d["el"]), ma=float(d["ma"]), rma=float(d["rma"]),
                   el_n=int(d["n"]), source=str(d.get("source", "unknown")))


# ---------------------------------------------------------------------------
# Model protocol dispatch
# ---------------------------------------------------------------------------

def _prob_rows(model, tokens: np.ndarray) -> np.ndarray:
    """Next-token probability rows [T-1, V] for a teacher-forced sequence."""
    if isinstance(model, ModelParams):
        return forward_probs(model, tokens)
    if hasattr(model, "seq_dists"):
        return np.asarray(model.seq_dists(tokens), dtype=np.float64)
    rows = [np.asarray(model.next_dist(tokens[: t + 1]), dtype=np.float64)
            for t in range(tokens.shape[0] - 1)]
    return np.stack(rows)


def _greedy_rows(model, tokens: np.ndarray) -> np.ndarray:
    """Greedy continuation matrix [T-1, T]: row r extends prefix tokens[:r+1]."""
    if isinstance(model, ModelParams):
        return greedy_extraction_matrix(model, tokens)
    T = tokens.shape[0]
    G = np.empty((T - 1, T), dtype=np.int64)
    for r in range(T - 1):
        row = list(tokens[: r + 1])
        for _ in range(T - r - 1):
            dist = np.asarray(model.next_dist(np.asarray(row, dtype=np.int64)))
            row.append(int(np.argmax(dist)))
        G[r] = row
    return G


def _checked_tokens(x, min_len: int = 2) -> np.ndarray:
    tokens = token_array(x)
    if tokens.shape[0] < min_len:
        raise SequenceTooShort(f"sequence of length {tokens.shape[0]}; need >= {min_len}")
    return tokens


# ---------------------------------------------------------------------------
# Memorization metrics
# ---------------------------------------------------------------------------

def ma(model, x, indexing: str = "standard") -> float:
    """Fraction of next-token argmax predictions that hit the true token.

    "standard" scores all T-1 transitions x[<=t] -> x[t+1]. "literal"
    keeps the printed-formula bounds instead: the empty-context first
    term is unevaluable and counts as a miss, and the final transition
    is not scored; the denominator stays T-1.
    """
    tokens = _checked_tokens(x)
    rows = _prob_rows(model, tokens)
    picks = np.argmax(rows, axis=-1)
    if indexing == "standard":
        return float(np.mean(picks == tokens[1:]))
    if indexing == "literal":
        hits = int(np.sum(picks[: -1] == tokens[1:-1])) if tokens.shape[0] > 2 else 0
        return hits / (tokens.shape[0] - 1)
    raise InvalidInput(f"unknown indexing mode {indexing!r}")


def rma(model, x, indexing: str = "standard") -> float:
    """Mean probability assigned to the true next token."""
    tokens = _checked_tokens(x)
    rows = _prob_rows(model, tokens)
    true_p = rows[np.arange(tokens.shape[0] - 1), tokens[1:]]
    if indexing == "standard":
        return float(true_p.mean())
    if indexing == "literal":
        s = float(true_p[:-1].sum()) if tokens.shape[0] > 2 else 0.0
        return s / (tokens.shape[0] - 1)
    raise InvalidInput(f"unknown indexing mode {indexing!r}")


def _ngrams(tokens, n: int) -> list[tuple]:
    seq = [int(t) for t in tokens]
    return [tuple(seq[i: i + n]) for i in range(len(seq) - n + 1)]


def overlap_n(a, b, n: int) -> float:
    """Fraction of a's n-grams (with duplicates) present in b's n-gram set."""
    if n < 1:
        raise InvalidInput("n-gram order must be >= 1")
    a_grams = _ngrams(token_array(a), n)
    if not a_grams:
        return 0.0
    b_set = set(_ngrams(token_array(b), n))
    return sum(1 for g in a_grams if g in b_set) / len(a_grams)


def el_n(model, x, n: int = DEFAULT_EL_ORDER) -> float:
    """Extraction likelihood: mean greedy-continuation n-gram overlap.

    For each prefix length t in 1..T-n, the model greedily generates the
    remaining T-t tokens; the score is the mean overlap of those
    continuations with the true suffixes.
    """
    if n < 1:
        raise InvalidInput("n-gram order must be >= 1")
    tokens = _checked_tokens(x)
    T = tokens.shape[0]
    if T <= n:
        raise SequenceTooShort(f"need more than n={n} tokens, got {T}")
    G = _greedy_rows(model, tokens)
    vals = [overlap_n(G[t - 1, t:], tokens[t:], n) for t in range(1, T - n + 1)]
    return math.fsum(vals) / len(vals)


def metric_triple(model, x, n: int = DEFAULT_EL_ORDER) -> MetricTriple:
    return MetricTriple(el=el_n(model, x, n), ma=ma(model, x), rma=rma(model, x), el_n=n)


# ---------------------------------------------------------------------------
# Generation-overlap scores
# ---------------------------------------------------------------------------

def bleu(hyp, ref) -> float:
    """Sentence BLEU on token ids: clipped precisions for orders 1..4
    (orders longer than the hypothesis are dropped; zero-count precisions
    floor at 1e-9), geometric mean, times the brevity penalty.
    """
    h = [int(t) for t in token_array(hyp)]
    r = [int(t) for t in token_array(ref)]
    if not h or not r:
        raise InvalidInput("bleu needs non-empty sequences")
    log_sum = 0.0
    orders = min(4, len(h))
    for n in range(1, orders + 1):
        h_counts = Counter(_ngrams(h, n))
        r_counts = Counter(_ngrams(r, n))
        clipped = sum(min(c, r_counts[g]) for g, c in h_counts.items())
        total = sum(h_counts.values())
        precision = clipped / total if clipped > 0 else 1e-9
        log_sum += math.log(precision)
    bp = math.exp(min(0.0, 1.0 - len(r) / len(h)))
    return bp * math.exp(log_sum / orders)


def chrf(hyp: str, ref: str, beta: float = 2.0, max_order: int = 6) -> float:
    """Character n-gram F-score, orders 1..6, recall-weighted (beta=2).

    Orders with no reference n-grams are skipped; characters are used
    as-is (whitespace included).
    """
    if not hyp or not ref:
        raise InvalidInput("chrf needs non-empty strings")
    beta2 = beta * beta
    scores = []
    for n in range(1, max_order + 1):
        r_counts = Counter(tuple(ref[i: i + n]) for i in range(len(ref) - n + 1))
        if not r_counts:
            continue
        h_counts = Counter(tuple(hyp[i: i + n]) for i in range(len(hyp) - n + 1))
        matches = sum(min(c, r_counts[g]) for g, c in h_counts.items())
        h_total = sum(h_counts.values())
        r_total = sum(r_counts.values())
        prec = matches / h_total if h_total else 0.0
        rec = matches / r_total
        if prec + rec == 0.0:
            scores.append(0.0)
        else:
            scores.append((1 + beta2) * prec * rec / (beta2 * prec + rec))
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Forgetting thresholds
# ---------------------------------------------------------------------------

def compute_thresholds(model, heldout, n: int = DEFAULT_EL_ORDER,
                       source: str = "heldout") -> ForgettingThresholds:
    """Component-wise mean of (EL_n, MA, RMA) over held-out sequences."""
    if not heldout:
        raise InvalidInput("heldout set is empty")
    triples = [metric_triple(model, s, n) for s in heldout]
    k = len(triples)
    return ForgettingThresholds(
        el=math.fsum(t.el for t in triples) / k,
        ma=math.fsum(t.ma for t in triples) / k,
        rma=math.fsum(t.rma for t in triples) / k,
        el_n=n,
        source=source,
    )


def load_reference_thresholds(name: str) -> ForgettingThresholds:
    """Published reference thresholds by model name (stored in percent)."""
    raw = resources.files("unlearnlab.data").joinpath("reference_thresholds.json")
    table = json.loads(raw.read_text(encoding="utf-8"))
    key = name.lower()
    if key not in table["models"]:
        known = ", ".join(sorted(table["models"]))
        raise InvalidInput(f"unknown reference model {name!r}; known: {known}")
    row = table["models"][key]
    return ForgettingThresholds(
        el=row["el10"] / 100.0,
        ma=row["ma"] / 100.0,
        rma=row["rma"] / 100.0,
        el_n=REFERENCE_EL_ORDER,
        source=f"paper-reference:{key}",
    )
