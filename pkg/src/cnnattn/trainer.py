"""Subject-level 5-fold cross-validation with early stopping on validation AU-ROC."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .corpus import OUTCOMES, CohortRecord, SchemaError
from .embed import CBOW_DIM, STARSPACE_DIM, EmbeddingMatrix, LabeledBag, train_cbow, train_starspace
from .metrics import UndefinedMetricError, aupr, auroc
from .model import (DROPOUT_CONV, DROPOUT_EMBED, DROPOUT_HEAD, HEADS, N_FILTERS, ModelParams,
                    batch_arrays, batch_loss, init_params, predict, save_checkpoint)
from .seeds import substream, subseed
from .textpipe import MAX_LEN, EncodedNarrative, Vocab, build_vocab, encode, narrative_tokens

logger = logging.getLogger(__name__)

N_FOLDS = 5
REPORT_SCHEMA = "cnnattn-report/1"
PARTIAL_REPORT = "partial_report.json"
EMBEDDING_METHODS = ("cbow", "starspace")


class LeakageError(AssertionError):
    """A test-fold subject reached training, validation or embedding data."""


class SingleClassError(UndefinedMetricError):
    pass


@dataclass
class TrainConfig:
    outcome: str = "bounceback"
    head: str = "attn"
    embedding: str = "cbow"
    batch_size: int = 32
    lr: float = 0.001
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    dropout: tuple = (DROPOUT_EMBED, DROPOUT_CONV, DROPOUT_HEAD)
    n_filters: int = N_FILTERS
    embed_dim: int | None = None  # 100 for cbow, 300 for starspace
    embed_epochs: int = 5
    min_doc_freq: int = 5
    max_len: int = MAX_LEN
    truncate_side: str = "head"
    freeze_embeddings: bool = False
    shared_embeddings: bool = False
    std: str = "population"
    n_folds: int = N_FOLDS
    dtype: str = "float64"

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}; choose one of {', '.join(OUTCOMES)}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose one of {', '.join(HEADS)}")
        if self.embedding not in EMBEDDING_METHODS:
            raise ValueError(f"unknown embedding method {self.embedding!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        if self.std not in ("population", "sample"):
            raise ValueError("std must be 'population' or 'sample'")
        self.dropout = tuple(float(p) for p in self.dropout)

    @property
    def resolved_embed_dim(self) -> int:
        if self.embed_dim:
            return self.embed_dim
        return CBOW_DIM if self.embedding == "cbow" else STARSPACE_DIM


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: frozenset
    val: frozenset
    test: frozenset

    def stays(self, records: Sequence[CohortRecord], part: str) -> list[int]:
        subjects = getattr(self, part)
        return [i for i, r in enumerate(records) if r.subject_id in subjects]

    def to_dict(self) -> dict:
        return {"fold_index": self.fold_index, "train": sorted(self.train),
                "val": sorted(self.val), "test": sorted(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(int(d["fold_index"]), frozenset(d["train"]), frozenset(d["val"]), frozenset(d["test"]))


def make_folds(subject_ids, seed: int = 0, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Shuffle subjects into ``n_folds`` shards; fold k tests shard k and validates on shard k+1."""
    subjects = np.array(sorted(set(int(s) for s in subject_ids)))
    if subjects.size < 2 * n_folds:
        raise ValueError(f"need at least {2 * n_folds} subjects for {n_folds}-fold splitting, got {subjects.size}")
    rng = substream(seed, "folds")
    shards = np.array_split(subjects[rng.permutation(subjects.size)], n_folds)
    folds = []
    for k in range(n_folds):
        test = frozenset(int(s) for s in shards[k])
        val = frozenset(int(s) for s in shards[(k + 1) % n_folds])
        train = frozenset(int(s) for s in subjects) - test - val
        folds.append(FoldSplit(k, train, val, test))
    return folds


def save_folds(folds: Sequence[FoldSplit], path) -> None:
    Path(path).write_text(json.dumps({"schema": "cnnattn-folds/1",
                                      "folds": [f.to_dict() for f in folds]}, sort_keys=True) + "\n")


def load_folds(path) -> list[FoldSplit]:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != "cnnattn-folds/1":
        raise SchemaError(f"{path}: not a fold file")
    return [FoldSplit.from_dict(f) for f in d["folds"]]


def check_leakage(fold: FoldSplit, records: Sequence[CohortRecord], embedding_subjects=None) -> None:
    """Raise LeakageError if any partition overlap or embedding exposure is found."""
    if fold.train & fold.test or fold.val & fold.test or fold.train & fold.val:
        raise LeakageError(f"fold {fold.fold_index}: subject partitions overlap")
    if embedding_subjects is not None and set(embedding_subjects) & fold.test:
        raise LeakageError(f"fold {fold.fold_index}: embedding corpus includes test subjects")


# --------------------------------------------------------------------------
# per-fold data: vocabulary, embeddings, encodings
# --------------------------------------------------------------------------

@dataclass
class FoldData:
    fold: FoldSplit
    vocab: Vocab
    embedding: EmbeddingMatrix
    encoded: list
    embedding_subjects: frozenset


def tokenize_cohort(records: Sequence[CohortRecord]) -> list[list[str]]:
    return [narrative_tokens(r.narrative_text.split("\n")) for r in records]


def train_embedding(method: str, docs: Sequence[np.ndarray], records: Sequence[CohortRecord],
                    vocab: Vocab, config: TrainConfig, seed: int) -> EmbeddingMatrix:
    dim = config.resolved_embed_dim
    if method == "cbow":
        return train_cbow(docs, vocab, dim=dim, epochs=config.embed_epochs, seed=seed)
    bags = [LabeledBag(d, tuple(r.icd_codes)) for d, r in zip(docs, records)]
    return train_starspace(bags, vocab, dim=dim, epochs=config.embed_epochs, seed=seed)


def prepare_fold(records: Sequence[CohortRecord], tokens: Sequence[list], fold: FoldSplit,
                 config: TrainConfig) -> FoldData:
    """Vocabulary and embeddings from non-test subjects only, then encode every stay."""
    if config.shared_embeddings:
        # desk-scale shortcut: every subject feeds the embedding, which leaks test text
        emb_idx = list(range(len(records)))
    else:
        emb_idx = [i for i, r in enumerate(records) if r.subject_id not in fold.test]
    emb_subjects = frozenset(records[i].subject_id for i in emb_idx)
    if not config.shared_embeddings:
        check_leakage(fold, records, emb_subjects)
    vocab = build_vocab([tokens[i] for i in emb_idx], config.min_doc_freq)
    docs = [np.array([vocab.id(t) for t in tokens[i]], dtype=np.int64) for i in emb_idx]
    seed = subseed(config.seed, "embed", fold.fold_index)
    emb = train_embedding(config.embedding, docs, [records[i] for i in emb_idx], vocab, config, seed)
    encoded = [encode(t, vocab, config.max_len, config.truncate_side) for t in tokens]
    return FoldData(fold, vocab, emb, encoded, emb_subjects)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _labels(records, idx, outcome) -> np.ndarray:
    return np.array([records[i].labels[outcome] for i in idx], dtype=np.float64)


def evaluate(params: ModelParams, narratives: Sequence[EncodedNarrative], labels,
             outcome: str | None = None, with_trace: bool = False) -> dict:
    """Eval-mode AU-ROC / AU-PR plus the per-stay probabilities."""
    y = np.asarray(labels)
    if y.size == 0 or y.min() == y.max():
        raise SingleClassError(f"{outcome or 'labels'}: evaluation set has a single class")
    preds = predict(params, list(narratives), with_trace=with_trace)
    probs = np.array([p.probability for p in preds])
    return {"auroc": auroc(probs, y), "aupr": aupr(probs, y), "probabilities": probs, "predictions": preds}


@dataclass
class FoldHistory:
    val_auroc: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    best_epoch: int = -1


def train_fold(fold: FoldSplit, records: Sequence[CohortRecord], data: FoldData, config: TrainConfig,
               params: ModelParams | None = None) -> tuple[ModelParams, FoldHistory]:
    """Mini-batch Adam with early stopping; returns the best-validation parameters."""
    train_idx = fold.stays(records, "train")
    val_idx = fold.stays(records, "val")
    y_val = _labels(records, val_idx, config.outcome)
    if y_val.size == 0 or y_val.min() == y_val.max():
        raise SingleClassError(f"fold {fold.fold_index}: validation set has a single class "
                               f"for {config.outcome}; AU-ROC undefined")
    check_leakage(fold, records, None if config.shared_embeddings else data.embedding_subjects)
    if params is None:
        params = init_params(data.vocab, data.embedding, config.head,
                             seed=subseed(config.seed, "init", fold.fold_index),
                             n_filters=config.n_filters, freeze_embeddings=config.freeze_embeddings,
                             dtype=config.dtype)
        params.dropout = config.dropout
    trainable = params.trainable()
    state = nk.AdamState(trainable, lr=config.lr)
    shuffle_rng = substream(config.seed, "shuffle", fold.fold_index)
    dropout_rng = substream(config.seed, "dropout", fold.fold_index)
    train_idx = np.array(train_idx)
    y_all = np.array([r.labels[config.outcome] for r in records], dtype=np.float64)
    val_x = [data.encoded[i] for i in val_idx]

    history = FoldHistory()
    best_auc, best_params, stale = -math.inf, params.copy(), 0
    for epoch in range(config.max_epochs):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            if any(records[i].subject_id in fold.test or records[i].subject_id in fold.val for i in batch):
                raise LeakageError(f"fold {fold.fold_index}: held-out stay in a training batch")
            ids, n_valid = batch_arrays([data.encoded[i] for i in batch])
            for p in trainable.values():
                p.zero_grad()
            loss = batch_loss(params, ids, n_valid, y_all[batch], True, dropout_rng)
            loss.backward()
            nk.adam_step(trainable, {k: p.grad for k, p in trainable.items()}, state)
            epoch_loss += float(loss.data) * batch.size
        history.train_loss.append(epoch_loss / max(order.size, 1))
        val_auc = evaluate(params, val_x, y_val, config.outcome)["auroc"]
        history.val_auroc.append(val_auc)
        logger.info("fold %d epoch %d loss %.4f val auroc %.4f", fold.fold_index, epoch,
                    history.train_loss[-1], val_auc)
        if val_auc > best_auc:
            best_auc, best_params, stale = val_auc, params.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
        # AU-ROC cannot exceed 1, so patience could only confirm the current best
        if stale >= config.patience or best_auc >= 1.0:
            break
    return best_params, history


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold_index: int
    auroc: float
    aupr: float
    best_epoch: int
    best_val_auroc: float
    n_train: int
    n_val: int
    n_test: int
    checkpoint: str | None = None
    test_stays: list = field(default_factory=list)
    test_probabilities: list = field(default_factory=list)


@dataclass
class RunResult:
    config: dict
    folds: list
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "config": self.config,
                "folds": [asdict(f) for f in self.folds], "mean": self.mean, "std": self.std}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    def table(self) -> str:
        name = {"max": "CNN-Max", "attn": "CNN-Attn"}[self.config["head"]]
        emb = {"cbow": "Word2Vec", "starspace": "StarSpace"}[self.config["embedding"]]
        lines = [f"{'Model':<10}{'Embedding':<11}{self.config['outcome'] + ' AU-ROC':>22}{'AU-PR':>16}",
                 f"{name:<10}{emb:<11}{self.mean['auroc']:>15.2f} ± {self.std['auroc']:.2f}"
                 f"{self.mean['aupr']:>9.2f} ± {self.std['aupr']:.2f}", "", "fold  auroc   aupr    best_epoch"]
        for f in self.folds:
            lines.append(f"{f.fold_index:<6}{f.auroc:<8.4f}{f.aupr:<8.4f}{f.best_epoch}")
        return "\n".join(lines) + "\n"


def aggregate(values: Sequence[float], std: str = "population") -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0 if std == "population" else 1))


def run_fold(records, tokens, fold: FoldSplit, config: TrainConfig, data: FoldData | None = None,
             checkpoint_dir=None) -> FoldResult:
    if data is None:
        data = prepare_fold(records, tokens, fold, config)
    params, hist = train_fold(fold, records, data, config)
    test_idx = fold.stays(records, "test")
    res = evaluate(params, [data.encoded[i] for i in test_idx], _labels(records, test_idx, config.outcome),
                   config.outcome)
    ckpt = None
    if checkpoint_dir is not None:
        ckpt_path = Path(checkpoint_dir) / f"fold{fold.fold_index}.ckpt"
        save_checkpoint(params, ckpt_path, {"fold_index": fold.fold_index, "outcome": config.outcome,
                                                 "max_len": config.max_len, "truncate_side": config.truncate_side})
        data.vocab.save(Path(checkpoint_dir) / f"fold{fold.fold_index}.vocab")
        ckpt = ckpt_path.name
    return FoldResult(
        fold_index=fold.fold_index, auroc=res["auroc"], aupr=res["aupr"], best_epoch=hist.best_epoch,
        best_val_auroc=max(hist.val_auroc), n_train=len(fold.stays(records, "train")),
        n_val=len(fold.stays(records, "val")), n_test=len(test_idx), checkpoint=ckpt,
        test_stays=[records[i].icustay_id for i in test_idx],
        test_probabilities=[float(p) for p in res["probabilities"]],
    )


def _write_partial(path: Path, config: TrainConfig, results, exc: Exception) -> None:
    doc = {"schema": REPORT_SCHEMA, "config": asdict(config), "complete": False,
           "error": f"{type(exc).__name__}: {exc}", "folds": [asdict(r) for r in results]}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    logger.error("run aborted; %d finished folds saved to %s", len(results), path)


def _run_fold_job(args):
    return run_fold(*args)


def run_experiment(records: Sequence[CohortRecord], config: TrainConfig, folds: Sequence[FoldSplit] | None = None,
                   fold_data: dict | None = None, tokens: Sequence[list] | None = None,
                   checkpoint_dir=None, jobs: int = 1) -> RunResult:
    """Train and test every fold, then aggregate mean and standard deviation.

    ``fold_data`` may map fold index to a prepared FoldData so several
    outcomes/heads can reuse one embedding run per fold.
    """
    records = list(records)
    if folds is None:
        folds = make_folds([r.subject_id for r in records], config.seed, config.n_folds)
    if tokens is None:
        tokens = tokenize_cohort(records)
    fold_data = fold_data if fold_data is not None else {}
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    jobs_args = [(records, tokens, f, config, fold_data.get(f.fold_index), checkpoint_dir) for f in folds]
    results = []
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                futures = [ex.submit(_run_fold_job, a) for a in jobs_args]
                for fut in futures:
                    results.append(fut.result())
        else:
            for a in jobs_args:
                results.append(_run_fold_job(a))
    except Exception as exc:
        if checkpoint_dir is not None:
            _write_partial(Path(checkpoint_dir) / PARTIAL_REPORT, config, results, exc)
        raise
    results.sort(key=lambda r: r.fold_index)
    mean, std = {}, {}
    for metric in ("auroc", "aupr"):
        mean[metric], std[metric] = aggregate([getattr(r, metric) for r in results], config.std)
    return RunResult(config=asdict(config), folds=results, mean=mean, std=std)


def fold_data_cache(records, tokens, folds, config: TrainConfig) -> dict:
    """Prepare FoldData for every fold once (embedding training is outcome-independent)."""
    return {f.fold_index: prepare_fold(records, tokens, f, config) for f in folds}


def config_with(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
