"""Narrative normalisation, vocabulary construction and fixed-length encoding."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_LEN = 8000
VOCAB_SCHEMA = "cnnattn-vocab/1"

UNK = "<unk>"
PAD = "<pad>"
NUM = "<num>"
DEID = "<deid>"
# UNK sits at id 0; PAD gets its own id so its embedding row can stay zero.
SPECIALS = (UNK, PAD, NUM, DEID)
UNK_ID, PAD_ID, NUM_ID, DEID_ID = range(4)

# Normalisation rules, applied in this order.
DEID_RE = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)
NUM_RE = re.compile(r"\d+(?:[.,/:]\d+)*")
SPLIT_PUNCT = ".,;:!?()/-"
_SPLIT_RE = re.compile("([" + re.escape(SPLIT_PUNCT) + "])")
# anything that is not a word char, whitespace, split punctuation or a placeholder bracket
_DROP_RE = re.compile(r"[^\w\s" + re.escape(SPLIT_PUNCT) + r"<>]|_")
_PLACEHOLDER_RE = re.compile(r"(<num>|<deid>)")
_STRAY_BRACKET_RE = re.compile(r"[<>]")


def normalize(text: str) -> str:
    """Lowercase, replace de-id spans and digit runs, split punctuation, collapse spaces.

    >>> normalize("Pt is 72 y/o")
    'pt is <num> y / o'
    """
    t = text.lower()
    t = DEID_RE.sub(f" {DEID} ", t)
    t = NUM_RE.sub(f" {NUM} ", t)
    # protect placeholders while stray angle brackets are removed
    parts = _PLACEHOLDER_RE.split(t)
    cleaned = []
    for part in parts:
        if part in (NUM, DEID):
            cleaned.append(f" {part} ")
            continue
        part = _STRAY_BRACKET_RE.sub(" ", part)
        part = _DROP_RE.sub("", part)
        part = _SPLIT_RE.sub(r" \1 ", part)
        cleaned.append(part)
    return " ".join("".join(cleaned).split())


def tokenize(text: str | Sequence[str]) -> list[str]:
    """Whitespace split. A sequence of notes is joined by a single space first."""
    if not isinstance(text, str):
        text = " ".join(text)
    return text.split()


def narrative_tokens(notes: Sequence[str]) -> list[str]:
    return tokenize([normalize(n) for n in notes])


@dataclass(frozen=True)
class Vocab:
    itos: tuple[str, ...]
    doc_freq: tuple[int, ...]
    min_doc_freq: int = 5
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stoi", {w: i for i, w in enumerate(self.itos)})
        if self.itos[:len(SPECIALS)] != SPECIALS:
            raise ValueError("vocab must start with the special tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def lines(self) -> list[str]:
        return [f"{w}\t{i}\t{df}" for i, (w, df) in enumerate(zip(self.itos, self.doc_freq))]

    @property
    def hash(self) -> str:
        h = hashlib.sha256("\n".join(self.lines()).encode("utf-8"))
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join([f"# {VOCAB_SCHEMA}", *self.lines()]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, min_doc_freq: int = 5) -> "Vocab":
        words, dfs = [], []
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != f"# {VOCAB_SCHEMA}":
            raise ValueError(f"{path}: not a vocabulary file")
        for n, line in enumerate(lines[1:]):
            w, i, df = line.split("\t")
            if int(i) != n:
                raise ValueError(f"{path}: id {i} on line {n + 1} is out of order")
            words.append(w)
            dfs.append(int(df))
        return cls(tuple(words), tuple(dfs), min_doc_freq)


def build_vocab(documents: Iterable[Sequence[str]], min_doc_freq: int = 5) -> Vocab:
    """Keep words seen in at least ``min_doc_freq`` distinct documents.

    Ids follow descending document frequency, ties broken alphabetically.
    """
    df: Counter = Counter()
    n_docs = 0
    for doc in documents:
        n_docs += 1
        df.update(set(doc))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    special_df = [df.pop(s, 0) for s in SPECIALS]
    kept = sorted((w for w, c in df.items() if c >= min_doc_freq), key=lambda w: (-df[w], w))
    return Vocab(SPECIALS + tuple(kept), tuple(special_df) + tuple(df[w] for w in kept), min_doc_freq)


@dataclass(frozen=True)
class EncodedNarrative:
    ids: np.ndarray
    n_real_tokens: int

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_valid(self) -> int:
        return min(self.n_real_tokens, self.length)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.length) < self.n_valid


def encode(tokens: Sequence[str], vocab: Vocab, max_len: int = MAX_LEN,
           truncate_side: str = "head") -> EncodedNarrative:
    """Map tokens to ids, truncate to ``max_len`` and right-pad with PAD."""
    if truncate_side == "head":
        kept = tokens[:max_len]
    elif truncate_side == "tail":
        kept = tokens[-max_len:] if len(tokens) > max_len else tokens
    else:
        raise ValueError(f"truncate_side must be 'head' or 'tail', got {truncate_side!r}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:len(kept)] = [vocab.id(t) for t in kept]
    return EncodedNarrative(ids, len(tokens))
