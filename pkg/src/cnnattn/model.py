"""CNN-Max and CNN-Attn narrative classifiers.

Both share an embedding layer and three filter banks of widths 1, 2 and 3.
CNN-Max concatenates the per-filter max-pooled features (3 x 64); CNN-Attn
stacks the three feature maps into one 3L x 64 matrix and pools it with a
learned query vector. A sigmoid output layer turns either representation
into a risk probability.

Only the first ``n_real_tokens`` positions of a narrative are ever read, so
the PAD tail of the fixed 8000-token encoding costs nothing and cannot
influence the output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .embed import EmbeddingMatrix
from .textpipe import MAX_LEN, PAD_ID, EncodedNarrative, Vocab

WIDTHS = (1, 2, 3)
N_FILTERS = 64
DROPOUT_EMBED = 0.2
DROPOUT_CONV = 0.3
DROPOUT_HEAD = 0.3
HEADS = ("max", "attn")
CHECKPOINT_MAGIC = "cnnattn-checkpoint/1"


class ModelInputError(ValueError):
    pass


@dataclass
class ModelParams:
    head: str
    tensors: dict
    vocab_hash: str
    embedding_method: str = "cbow"
    dropout: tuple = (DROPOUT_EMBED, DROPOUT_CONV, DROPOUT_HEAD)
    freeze_embeddings: bool = False

    @property
    def embed_dim(self) -> int:
        return int(self.tensors["embedding"].shape[1])

    @property
    def dtype(self) -> str:
        return str(self.tensors["out_w"].data.dtype)

    @property
    def n_filters(self) -> int:
        return int(self.tensors["conv1_b"].shape[0])

    def trainable(self) -> dict:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def copy(self) -> "ModelParams":
        tensors = {k: nk.Tensor(t.data.copy(), t.requires_grad, name=k) for k, t in self.tensors.items()}
        return ModelParams(self.head, tensors, self.vocab_hash, self.embedding_method,
                           self.dropout, self.freeze_embeddings)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}


@dataclass
class AttentionTrace:
    """Attention weights over the 3 x L filter positions of one narrative.

    Position i belongs to filter width ``WIDTHS[i // L]`` and covers tokens
    ``[i % L, i % L + w - 1]``.
    """

    alpha: np.ndarray
    n_real_tokens: int
    length: int = MAX_LEN

    def span(self, i: int) -> tuple[int, int]:
        return WIDTHS[i // self.length], i % self.length

    @property
    def span_map(self) -> np.ndarray:
        idx = np.arange(len(WIDTHS) * self.length)
        return np.stack([np.asarray(WIDTHS)[idx // self.length], idx % self.length], axis=1)


@dataclass
class Prediction:
    probability: float
    logit: float
    trace: AttentionTrace | None = None


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(vocab: Vocab, embedding: EmbeddingMatrix, head: str, seed: int = 0,
                n_filters: int = N_FILTERS, freeze_embeddings: bool = False,
                dtype: str = "float64") -> ModelParams:
    """Glorot-uniform filters and output layer, small uniform query, zero biases.

    Initial values are drawn in float64 and then cast, so a float32 model
    starts from the rounded float64 one.
    """
    if head not in HEADS:
        raise ModelInputError(f"head must be one of {HEADS}, got {head!r}")
    if embedding.n_rows != len(vocab) or embedding.vocab_hash != vocab.hash:
        raise ModelInputError("embedding matrix does not match the vocabulary")
    rng = np.random.default_rng(seed)
    E, F = embedding.dim, n_filters
    emb = embedding.vectors.copy()
    emb[PAD_ID] = 0.0
    t = {"embedding": nk.Tensor(emb, not freeze_embeddings, name="embedding")}
    for w in WIDTHS:
        # conv fan counts include the receptive field width
        t[f"conv{w}_w"] = nk.Tensor(_glorot(rng, (w, E, F), w * E, w * F), True, name=f"conv{w}_w")
        t[f"conv{w}_b"] = nk.Tensor(np.zeros(F), True, name=f"conv{w}_b")
    if head == "attn":
        t["query"] = nk.Tensor(rng.uniform(-0.01, 0.01, size=F), True, name="query")
        in_dim = F
    else:
        in_dim = F * len(WIDTHS)
    t["out_w"] = nk.Tensor(_glorot(rng, (in_dim,), in_dim, 1), True, name="out_w")
    t["out_b"] = nk.Tensor(np.zeros(()), True, name="out_b")
    for v in t.values():
        v.data = v.data.astype(dtype)
    return ModelParams(head, t, vocab.hash, embedding.method, freeze_embeddings=freeze_embeddings)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def batch_arrays(narratives: Sequence[EncodedNarrative]) -> tuple[np.ndarray, np.ndarray]:
    """Stack narratives cut to the longest real length in the batch (at least 3)."""
    n_valid = np.array([x.n_valid for x in narratives])
    if np.any(n_valid == 0):
        raise ModelInputError("narrative has no real tokens")
    L = max(int(n_valid.max()), max(WIDTHS))
    ids = np.full((len(narratives), L), PAD_ID, dtype=np.int64)
    for i, x in enumerate(narratives):
        k = min(L, x.length)
        ids[i, :k] = x.ids[:k]
    return ids, n_valid


def forward(params: ModelParams, ids: np.ndarray, n_valid: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> tuple[nk.Tensor, nk.Tensor | None]:
    """Batched logits (B,) and, for the attention head, alpha (B, 3L)."""
    t = params.tensors
    p_emb, p_conv, p_head = params.dropout
    L = ids.shape[-1]
    mask = nk.prefix_mask(n_valid, L)
    x = nk.embed_lookup(ids, t["embedding"], frozen_rows=(PAD_ID,))
    x = nk.dropout(x, p_emb, training, rng)
    maps = []
    for w in WIDTHS:
        h = nk.conv1d_same(x, t[f"conv{w}_w"], t[f"conv{w}_b"], mask)
        maps.append(nk.dropout(h, p_conv, training, rng))
    alpha = None
    if params.head == "max":
        pooled = nk.concat([nk.masked_max_pool(h, mask) for h in maps], axis=-1)
    else:
        H = nk.concat(maps, axis=-2)
        mask3 = np.concatenate([mask] * len(WIDTHS), axis=-1)
        pooled, alpha = nk.scaled_dot_attention(H, t["query"], mask3)
    pooled = nk.dropout(pooled, p_head, training, rng)
    return nk.linear(pooled, t["out_w"], t["out_b"]), alpha


def _full_alpha(alpha_row: np.ndarray, L: int, full_len: int) -> np.ndarray:
    out = np.zeros(len(WIDTHS) * full_len)
    for k in range(len(WIDTHS)):
        n = min(L, full_len)
        out[k * full_len:k * full_len + n] = alpha_row[k * L:k * L + n]
    return out


def predict(params: ModelParams, narratives: Sequence[EncodedNarrative], batch_size: int = 32,
            with_trace: bool = True) -> list[Prediction]:
    """Eval-mode predictions; attention traces are attached for the attention head."""
    preds = []
    for start in range(0, len(narratives), batch_size):
        chunk = narratives[start:start + batch_size]
        ids, n_valid = batch_arrays(chunk)
        logits, alpha = forward(params, ids, n_valid, training=False)
        probs = nk.sigmoid(logits.data)
        for i, x in enumerate(chunk):
            trace = None
            if alpha is not None and with_trace:
                trace = AttentionTrace(_full_alpha(alpha.data[i], ids.shape[1], x.length),
                                       x.n_real_tokens, x.length)
            preds.append(Prediction(float(probs[i]), float(logits.data[i]), trace))
    return preds


def _forward_single(head: str, x: EncodedNarrative, params: ModelParams, mode: str,
                    rng: np.random.Generator | None) -> Prediction:
    if params.head != head:
        raise ModelInputError(f"parameters carry a {params.head!r} head, expected {head!r}")
    if mode not in ("train", "eval"):
        raise ModelInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        return predict(params, [x])[0]
    ids, n_valid = batch_arrays([x])
    logits, _ = forward(params, ids, n_valid, training=True, rng=rng)
    z = float(logits.data[0])
    return Prediction(float(nk.sigmoid(z)), z)


def forward_max(x: EncodedNarrative, params: ModelParams, mode: str = "eval", rng=None) -> Prediction:
    return _forward_single("max", x, params, mode, rng)


def forward_attn(x: EncodedNarrative, params: ModelParams, mode: str = "eval", rng=None) -> Prediction:
    return _forward_single("attn", x, params, mode, rng)


def batch_loss(params: ModelParams, ids, n_valid, labels, training: bool, rng=None) -> nk.Tensor:
    logits, _ = forward(params, ids, n_valid, training, rng)
    return nk.sigmoid_bce(logits, labels)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """One JSON header line, then every parameter as little-endian float64 in header order."""
    names = sorted(params.tensors)
    header = {
        "format": CHECKPOINT_MAGIC,
        "head": params.head,
        "vocab_hash": params.vocab_hash,
        "embedding_method": params.embedding_method,
        "dropout": list(params.dropout),
        "freeze_embeddings": params.freeze_embeddings,
        "dtype": params.dtype,
        "params": [[n, list(params.tensors[n].shape)] for n in names],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ModelInputError(f"{path}: not a checkpoint ({header.get('format')})")
    payload = memoryview(raw)[nl + 1:]
    tensors, off = {}, 0
    freeze = header.get("freeze_embeddings", False)
    dtype = header.get("dtype", "float64")
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(payload):
            raise ModelInputError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(payload[off:off + 8 * n], dtype="<f8").astype(dtype).reshape(shape)
        off += 8 * n
        tensors[name] = nk.Tensor(arr, not (freeze and name == "embedding"), name=name)
    if off != len(payload):
        raise ModelInputError(f"{path}: {len(payload) - off} unexpected trailing bytes")
    params = ModelParams(header["head"], tensors, header["vocab_hash"], header["embedding_method"],
                         tuple(header["dropout"]), freeze)
    return params, header.get("extra", {})
