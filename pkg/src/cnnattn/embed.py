"""Word embeddings: negative-sampling CBOW and a label-supervised StarSpace variant."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .numkernel import sigmoid
from .textpipe import PAD_ID, SPECIALS, UNK_ID, Vocab

logger = logging.getLogger(__name__)

CBOW_DIM = 100
STARSPACE_DIM = 300


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    vocab_hash: str
    vectors: np.ndarray
    method: str
    history: list = field(default_factory=list, compare=False)
    # starspace only
    labels: list | None = field(default=None, compare=False)
    label_vectors: np.ndarray | None = field(default=None, compare=False, repr=False)
    # cbow only: target-side vectors, kept for inspection
    output_vectors: np.ndarray | None = field(default=None, compare=False, repr=False)
    skipped: int = field(default=0, compare=False)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class LabeledBag:
    word_ids: np.ndarray
    labels: tuple


def init_vectors(n_rows: int, dim: int, rng: np.random.Generator, scale: float | None = None) -> np.ndarray:
    """Small uniform init; UNK ~ U(-0.25/dim, 0.25/dim); PAD row zero."""
    scale = 0.5 / dim if scale is None else scale
    vecs = rng.uniform(-scale, scale, size=(n_rows, dim))
    vecs[UNK_ID] = rng.uniform(-0.25 / dim, 0.25 / dim, size=dim)
    vecs[PAD_ID] = 0.0
    return vecs


def _trainable(doc: np.ndarray) -> np.ndarray:
    doc = np.asarray(doc)
    return doc[(doc != PAD_ID) & (doc != UNK_ID)]


def _scatter_add(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """target[rows[i]] += values[i] with repeated rows summed (sparse matmul beats np.add.at)."""
    n = rows.size
    s = sparse.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(target.shape[0], n))
    touched = np.unique(rows)
    target[touched] += (s[touched] @ values)


def _negative_table(docs: Sequence[np.ndarray], n_rows: int, power: float = 0.75) -> np.ndarray:
    counts = np.zeros(n_rows)
    for d in docs:
        np.add.at(counts, d, 1.0)
    probs = counts ** power
    return probs / probs.sum()


def train_cbow(corpus: Sequence[Sequence[int]], vocab: Vocab, dim: int = CBOW_DIM, window: int = 5,
               negatives: int = 5, epochs: int = 5, lr: float = 0.025, seed: int = 0,
               batch_size: int = 256) -> EmbeddingMatrix:
    """Negative-sampling CBOW over id sequences (UNK and PAD are skipped).

    Context vector is the mean of the input vectors within ``window`` of the
    target; loss is -log s(u_t . c) - sum log s(-u_n . c) with negatives from
    the unigram^0.75 distribution. Learning rate decays linearly to 1e-4 * lr.
    """
    docs = [_trainable(d) for d in corpus]
    docs = [d for d in docs if d.size > 1]
    if not docs:
        raise ValueError("CBOW needs a non-empty corpus")
    rng = np.random.default_rng(seed)
    V = len(vocab)
    w_in = init_vectors(V, dim, rng)
    w_out = np.zeros((V, dim))
    emb = EmbeddingMatrix(vocab.hash, w_in, "cbow", output_vectors=w_out)
    if epochs == 0:
        return emb
    noise_cdf = np.cumsum(_negative_table(docs, V))

    # every (doc, position) pair with its padded context window
    offsets = np.r_[np.arange(-window, 0), np.arange(1, window + 1)]
    targets, contexts = [], []
    for d in docs:
        pos = np.arange(d.size)
        ctx_pos = pos[:, None] + offsets[None, :]
        valid = (ctx_pos >= 0) & (ctx_pos < d.size)
        ctx = np.where(valid, d[np.clip(ctx_pos, 0, d.size - 1)], -1)
        targets.append(d)
        contexts.append(ctx)
    targets = np.concatenate(targets)
    contexts = np.concatenate(contexts)
    n = targets.size
    total_steps = epochs * ((n + batch_size - 1) // batch_size)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            alpha = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            idx = order[start:start + batch_size]
            t = targets[idx]
            c = contexts[idx]
            cmask = c >= 0
            n_ctx = cmask.sum(axis=1, keepdims=True)
            b_idx, k_idx = np.nonzero(cmask)
            # batch x vocab context-count matrix
            ctx = sparse.csr_matrix((np.ones(b_idx.size), (b_idx, c[b_idx, k_idx])), shape=(idx.size, V))
            h = (ctx @ w_in) / n_ctx
            neg = np.minimum(np.searchsorted(noise_cdf, rng.random((idx.size, negatives)), side="right"), V - 1)
            s_pos = np.einsum("bd,bd->b", h, w_out[t])
            s_neg = np.einsum("bd,bkd->bk", h, w_out[neg])
            p_pos = sigmoid(s_pos)
            p_neg = sigmoid(s_neg)
            # as in word2vec, a draw equal to the target is not a negative
            real_neg = neg != t[:, None]
            epoch_loss += float(-np.log(p_pos + 1e-12).sum() - (np.log(1.0 - p_neg + 1e-12) * real_neg).sum())
            g_pos = p_pos - 1.0
            g_neg = p_neg * real_neg
            dh = g_pos[:, None] * w_out[t] + np.einsum("bk,bkd->bd", g_neg, w_out[neg])
            _scatter_add(w_out, np.r_[t, neg.reshape(-1)],
                         np.vstack([-alpha * g_pos[:, None] * h,
                                    (-alpha * g_neg[..., None] * h[:, None, :]).reshape(-1, dim)]))
            touched = np.unique(c[cmask])
            w_in[touched] += ctx.T.tocsr()[touched] @ (-alpha * dh / n_ctx)
        emb.history.append(epoch_loss / n)
        logger.debug("cbow epoch %d loss %.4f", epoch, emb.history[-1])
    w_in[PAD_ID] = 0.0
    return emb


def train_starspace(bags: Sequence[LabeledBag], vocab: Vocab, dim: int = STARSPACE_DIM,
                    negatives: int = 10, margin: float = 0.05, epochs: int = 5, lr: float = 0.01,
                    seed: int = 0, label_space: Sequence[str] | None = None) -> EmbeddingMatrix:
    """Embed words and labels jointly with a margin ranking loss.

    A document is the sum of its word vectors divided by sqrt(#words); each
    (document, positive label) pair is pushed above ``negatives`` labels drawn
    uniformly from labels the document does not carry. Similarity is the dot
    product. Bags without labels are skipped.
    """
    rng = np.random.default_rng(seed)
    V = len(vocab)
    labels = sorted(set(label_space or ()) | {l for b in bags for l in b.labels})
    lid = {l: i for i, l in enumerate(labels)}
    usable, skipped = [], 0
    for b in bags:
        words = _trainable(b.word_ids)
        if not b.labels or words.size == 0:
            skipped += 1
            continue
        usable.append((words, np.array(sorted(lid[l] for l in set(b.labels)))))
    if skipped:
        logger.info("starspace: skipped %d bags without labels or words", skipped)
    w = init_vectors(V, dim, rng, scale=0.01)
    lab = rng.normal(0.0, 0.01, size=(max(len(labels), 1), dim))
    emb = EmbeddingMatrix(vocab.hash, w, "starspace", labels=labels, label_vectors=lab, skipped=skipped)
    if epochs == 0 or not usable:
        return emb
    if len(labels) < 2:
        raise ValueError("starspace needs at least two distinct labels to draw negatives")

    pairs = [(i, int(p)) for i, (_, ls) in enumerate(usable) for p in ls]
    all_labels = np.arange(len(labels))
    for epoch in range(epochs):
        epoch_loss = 0.0
        for j in rng.permutation(len(pairs)):
            i, pos = pairs[j]
            words, own = usable[i]
            candidates = np.setdiff1d(all_labels, own, assume_unique=True)
            if candidates.size == 0:
                continue
            neg = rng.choice(candidates, size=negatives, replace=True)
            norm = 1.0 / np.sqrt(words.size)
            doc = w[words].sum(axis=0) * norm
            s_pos = doc @ lab[pos]
            s_neg = lab[neg] @ doc
            losses = margin - s_pos + s_neg
            active = losses > 0
            if not active.any():
                continue
            epoch_loss += float(losses[active].sum())
            n_act = int(active.sum())
            g_doc = -n_act * lab[pos] + lab[neg[active]].sum(axis=0)
            lab[pos] += lr * n_act * doc
            np.add.at(lab, neg[active], -lr * doc)
            np.add.at(w, words, -lr * norm * g_doc)
        emb.history.append(epoch_loss / max(len(pairs), 1))
    w[PAD_ID] = 0.0
    return emb


def doc_vector(emb: EmbeddingMatrix, word_ids) -> np.ndarray:
    words = _trainable(word_ids)
    return emb.vectors[words].sum(axis=0) / np.sqrt(max(words.size, 1))


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def save_embeddings(emb: EmbeddingMatrix, vocab: Vocab, path, binary: bool = False) -> None:
    """Header ``<vocab_hash> <V> <dim> <method>`` then one row per vocabulary word.

    Text rows are ``word v1 ... vdim`` with shortest round-trip decimals;
    binary rows are ``word `` + dim little-endian float64 + newline.
    """
    if emb.vocab_hash != vocab.hash or emb.n_rows != len(vocab):
        raise ValueError("embedding does not belong to this vocabulary")
    header = f"{emb.vocab_hash} {emb.n_rows} {emb.dim} {emb.method}{' binary' if binary else ''}\n"
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            for word, row in zip(vocab.itos, emb.vectors):
                fh.write(word.encode("utf-8") + b" " + row.astype("<f8").tobytes() + b"\n")
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header)
            for word, row in zip(vocab.itos, emb.vectors):
                fh.write(word + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path, vocab: Vocab | None = None) -> EmbeddingMatrix:
    """Read either format; refuses partial files and vocabulary mismatches."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) not in (4, 5):
            raise EmbeddingFormatError(f"{path}: malformed embedding header")
        vhash, n_rows, dim, method = header[0], int(header[1]), int(header[2]), header[3]
        binary = len(header) == 5 and header[4] == "binary"
        if vocab is not None and (vhash != vocab.hash or n_rows != len(vocab)):
            raise EmbeddingFormatError(f"{path}: vocabulary hash/size mismatch ({vhash}, {n_rows}) "
                             f"vs ({vocab.hash}, {len(vocab)})")
        vecs = np.empty((n_rows, dim))
        words = []
        for i in range(n_rows):
            if binary:
                word = bytearray()
                while (ch := fh.read(1)) not in (b" ", b""):
                    word += ch
                raw = fh.read(8 * dim + 1)
                if len(raw) != 8 * dim + 1 or raw[-1:] != b"\n":
                    raise EmbeddingFormatError(f"{path}: truncated at row {i}")
                vecs[i] = np.frombuffer(raw[:-1], dtype="<f8")
                words.append(word.decode("utf-8"))
            else:
                line = fh.readline()
                parts = line.decode("utf-8").split()
                if not line.endswith(b"\n") or len(parts) != dim + 1:
                    raise EmbeddingFormatError(f"{path}: truncated or malformed at row {i}")
                words.append(parts[0])
                vecs[i] = [float(x) for x in parts[1:]]
        if fh.read(1):
            raise EmbeddingFormatError(f"{path}: trailing data after {n_rows} rows")
    if vocab is not None and tuple(words) != vocab.itos:
        raise EmbeddingFormatError(f"{path}: word order differs from vocabulary")
    if tuple(words[:len(SPECIALS)]) != SPECIALS:
        raise EmbeddingFormatError(f"{path}: special tokens missing")
    return EmbeddingMatrix(vhash, vecs, method)
