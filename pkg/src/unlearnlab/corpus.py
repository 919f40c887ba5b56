"""Byte-level corpus handling: tokenization, synthetic documents, splits.

Token ids are raw UTF-8 bytes, so the vocabulary is exactly 256 and any
text round-trips without a trained tokenizer. Splits partition a corpus
into forget batches, a retain pool, and a held-out set by sequence id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInput, SequenceTooLong

BYTE_VOCAB = 256
DEFAULT_CONTEXT = 128

SPLITS = ("forget", "retain", "heldout", "generated")

# Word pools for the synthetic corpus. Short, ASCII-only, byte-level
# learnable; the numbered header keeps documents distinct from the start.
_ADJ = (
    "brave", "calm", "dusty", "eager", "faint", "grand", "hazy", "ivory",
    "jolly", "keen", "lunar", "mossy", "noble", "olive", "pale", "quiet",
)
_NOUN = (
    "otter", "lantern", "harbor", "meadow", "spruce", "kettle", "marble",
    "violin", "anchor", "beacon", "cinder", "dune", "ember", "fjord",
    "garnet", "heron",
)
_VERB = (
    "follows", "guards", "carries", "watches", "circles", "greets",
    "crosses", "mirrors", "shelters", "signals", "trades", "visits",
)


@dataclass(frozen=True)
class TokenSeq:
    """A finite token-id sequence with an id and a provenance tag."""

    tokens: tuple[int, ...]
    id: str
    split: str = "retain"

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise InvalidInput(f"sequence {self.id!r} has {len(self.tokens)} tokens; need >= 2")
        if any((not 0 <= t < BYTE_VOCAB) for t in self.tokens):
            raise InvalidInput(f"sequence {self.id!r} has token ids outside [0, {BYTE_VOCAB})")
        if self.split not in SPLITS:
            raise InvalidInput(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.tokens)

    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    def with_split(self, split: str) -> TokenSeq:
        return replace(self, split=split)


@dataclass
class CorpusSplit:
    """Disjoint forget batches, retain pool, and held-out sequences."""

    forget_batches: list[list[TokenSeq]]
    retain_pool: list[TokenSeq]
    heldout: list[TokenSeq]
    seed: int = 0

    def all_forget(self) -> list[TokenSeq]:
        return [s for batch in self.forget_batches for s in batch]

    def pretrain_pool(self) -> list[TokenSeq]:
        """Everything the model trains on; held-out sequences stay unseen."""
        return self.all_forget() + self.retain_pool


def tokenize(text: str, max_len: int = DEFAULT_CONTEXT, id: str | None = None,
             split: str = "retain") -> TokenSeq:
    """Encode UTF-8 text as raw bytes (vocabulary size 256)."""
    if not text:
        raise InvalidInput("cannot tokenize empty text")
    data = text.encode("utf-8")
    if len(data) > max_len:
        raise SequenceTooLong(f"text encodes to {len(data)} bytes; limit is {max_len}")
    if len(data) < 2:
        raise InvalidInput("text must encode to at least 2 bytes")
    if id is None:
        id = hashlib.sha1(data).hexdigest()[:12]
    return TokenSeq(tokens=tuple(data), id=id, split=split)


def detokenize(seq: TokenSeq | tuple[int, ...] | list[int] | np.ndarray,
               errors: str = "strict") -> str:
    """Decode token ids back to text; inverse of tokenize for valid UTF-8."""
    tokens = seq.tokens if isinstance(seq, TokenSeq) else tuple(int(t) for t in seq)
    return bytes(tokens).decode("utf-8", errors=errors)


def synth_corpus(seed: int, n_docs: int, len_range: tuple[int, int],
                 max_len: int = DEFAULT_CONTEXT) -> list[TokenSeq]:
    """Generate deterministic templated pseudo-sentences as byte sequences.

    Each document starts with a numbered header (so no two are identical)
    followed by words drawn from fixed pools. Byte lengths land inside
    len_range, never above max_len.
    """
    lo, hi = len_range
    if n_docs < 1:
        raise InvalidInput("n_docs must be >= 1")
    if not (2 <= lo <= hi <= max_len):
        raise InvalidInput(f"impossible length bounds ({lo}, {hi}) for max_len {max_len}")
    width = max(3, len(str(n_docs - 1)))
    header_len = width + 2  # "[", digits, "]"
    if header_len + 1 > hi:
        raise InvalidInput(f"max length {hi} cannot hold a distinct {header_len}-byte header")

    rng = np.random.default_rng(seed)
    docs: list[TokenSeq] = []
    for i in range(n_docs):
        parts = [f"[{i:0{width}d}]"]
        length = header_len
        while length < lo:
            pool = (_ADJ, _NOUN, _VERB)[int(rng.integers(3))]
            word = pool[int(rng.integers(len(pool)))]
            if length + 1 + len(word) > hi:
                # fall back to single letters so short ranges stay fillable
                word = chr(ord("a") + int(rng.integers(26)))
            parts.append(word)
            length += 1 + len(word)
        text = " ".join(parts)[:hi]
        docs.append(tokenize(text, max_len=max_len, id=f"doc{i:0{width}d}"))
    return docs


def make_splits(corpus: list[TokenSeq], n_forget_batches: int, forget_batch_size: int,
                heldout_frac: float, seed: int) -> CorpusSplit:
    """Partition a corpus into forget batches, retain pool, and held-out set."""
    if n_forget_batches < 1 or forget_batch_size < 1:
        raise InvalidInput("forget batch layout must be at least 1x1")
    if not 0.0 <= heldout_frac < 1.0:
        raise InvalidInput("heldout_frac must be in [0, 1)")
    ids = [s.id for s in corpus]
    if len(set(ids)) != len(ids):
        raise InvalidInput("corpus contains duplicate sequence ids")

    n_forget = n_forget_batches * forget_batch_size
    n_heldout = int(len(corpus) * heldout_frac)
    if n_forget + n_heldout + 1 > len(corpus):
        raise InvalidInput(
            f"corpus of {len(corpus)} cannot fill {n_forget} forget + "
            f"{n_heldout} heldout and keep a non-empty retain pool"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    shuffled = [corpus[int(i)] for i in order]

    forget_batches = [
        [s.with_split("forget") for s in shuffled[b * forget_batch_size:(b + 1) * forget_batch_size]]
        for b in range(n_forget_batches)
    ]
    heldout = [s.with_split("heldout") for s in shuffled[n_forget:n_forget + n_heldout]]
    retain = [s.with_split("retain") for s in shuffled[n_forget + n_heldout:]]
    return CorpusSplit(forget_batches=forget_batches, retain_pool=retain,
                       heldout=heldout, seed=seed)


# ---------------------------------------------------------------------------
# File formats: JSONL corpus and the split manifest
# ---------------------------------------------------------------------------

def load_corpus_jsonl(path: str | Path, max_len: int = DEFAULT_CONTEXT) -> list[TokenSeq]:
    """Read a JSONL corpus (fields: id, text, optional split)."""
    docs: list[TokenSeq] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise InvalidInput(f"{path}: line {lineno}: need object with 'id' and 'text'")
            if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
                raise InvalidInput(f"{path}: line {lineno}: 'id' and 'text' must be strings")
            if obj["id"] in seen:
                raise InvalidInput(f"{path}: line {lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            split = obj.get("split", "retain")
            try:
                docs.append(tokenize(obj["text"], max_len=max_len, id=obj["id"], split=split))
            except InvalidInput as exc:
                raise InvalidInput(f"{path}: line {lineno}: {exc}") from exc
    if not docs:
        raise InvalidInput(f"{path}: corpus file has no documents")
    return docs


def save_corpus_jsonl(path: str | Path, docs: list[TokenSeq]) -> None:
    """Write sequences as JSONL; requires every sequence to be valid UTF-8."""
    lines = []
    for s in docs:
        lines.append(json.dumps({"id": s.id, "text": detokenize(s), "split": s.split},
                                ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_manifest(split: CorpusSplit) -> dict:
    return {
        "forget_batches": [[s.id for s in batch] for batch in split.forget_batches],
        "retain": [s.id for s in split.retain_pool],
        "heldout": [s.id for s in split.heldout],
        "seed": split.seed,
    }


def apply_manifest(corpus: list[TokenSeq], manifest: dict) -> CorpusSplit:
    """Rebuild a CorpusSplit from a corpus and a saved manifest."""
    for key in ("forget_batches", "retain", "heldout"):
        if key not in manifest:
            raise InvalidInput(f"split manifest missing field {key!r}")
    by_id = {s.id: s for s in corpus}

    def pick(seq_id: str, split: str) -> TokenSeq:
        if seq_id not in by_id:
            raise InvalidInput(f"manifest references unknown sequence id {seq_id!r}")
        return by_id[seq_id].with_split(split)

    forget = [[pick(i, "forget") for i in batch] for batch in manifest["forget_batches"]]
    retain = [pick(i, "retain") for i in manifest["retain"]]
    heldout = [pick(i, "heldout") for i in manifest["heldout"]]
    all_ids = [s.id for b in forget for s in b] + [s.id for s in retain] + [s.id for s in heldout]
    if len(set(all_ids)) != len(all_ids):
        raise InvalidInput("split manifest assigns some id to more than one partition")
    return CorpusSplit(forget_batches=forget, retain_pool=retain, heldout=heldout,
                       seed=int(manifest.get("seed", 0)))
