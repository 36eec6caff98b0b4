"""End to end on a small synthetic corpus: tables -> cohort -> one fold -> clouds.

The synthetic generator writes MIMIC-shaped CSV tables in which every positive
stay carries one of a few planted phrases for its outcome. The same loader and
filters that read real MIMIC-III read these tables.

Run with ``python demos/02_synthetic_pipeline.py [outdir]``. About a minute.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from cnnattn.corpus import build_cohort, load_tables, prevalence
from cnnattn.explain import cohort_cloud, model_tokens, render_cloud, top_phrases
from cnnattn.model import predict
from cnnattn.synthetic import SIGNAL_PHRASES, SyntheticSpec, write_synthetic
from cnnattn.trainer import TrainConfig, evaluate, make_folds, prepare_fold, tokenize_cohort, train_fold

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)

# TABLES AND COHORT ==========================================================

write_synthetic(SyntheticSpec(n_subjects=200, seed=3, signal_strength=0.9), out / "tables")
records, funnel = build_cohort(load_tables(out / "tables"))
print(funnel)
print(prevalence(records))
print(records[0].narrative_text[:300], "...")

# planted phrases for the outcome we train on
outcome = "mort30"
print(SIGNAL_PHRASES[outcome])

# ONE FOLD ===================================================================

tokens = tokenize_cohort(records)
folds = make_folds([r.subject_id for r in records], seed=0)
fold = folds[0]
print(len(fold.train), len(fold.val), len(fold.test), "subjects in train / val / test")

# reference hyperparameters; only the epoch cap is lowered
config = TrainConfig(outcome=outcome, head="attn", max_epochs=40)
data = prepare_fold(records, tokens, fold, config)
print(len(data.vocab), "words;", data.embedding.dim, "dim cbow embedding")

params, history = train_fold(fold, records, data, config)
print("validation AU-ROC by epoch", np.round(history.val_auroc, 3))

test = fold.stays(records, "test")
labels = [records[i].labels[outcome] for i in test]
result = evaluate(params, [data.encoded[i] for i in test], labels, outcome)
print(f"test AU-ROC {result['auroc']:.3f}  AU-PR {result['aupr']:.3f}")

# ONE PATIENT ================================================================

preds = predict(params, [data.encoded[i] for i in test])
ids = [records[i].icustay_id for i in test]
traces = {s: p.trace for s, p in zip(ids, preds)}
toks = {records[i].icustay_id: model_tokens(data.encoded[i], data.vocab) for i in test}

riskiest = ids[int(np.argmax([p.probability for p in preds]))]
for p in top_phrases(traces[riskiest], toks[riskiest], k=10, stay_id=riskiest):
    print(f"{p.weight:.4f}  {p.context}")
render_cloud(top_phrases(traces[riskiest], toks[riskiest], k=10, stay_id=riskiest), out / "patient.svg")

# TOP-RISK COHORT ============================================================

cloud = cohort_cloud(ids, [p.probability for p in preds], traces, toks, outcome, top_frac=0.1)
print("cohort stays", cloud.stay_ids)
for p in cloud.phrases()[:5]:
    print(f"{p.weight:.4f}  {p.phrase}")
svg, tsv = render_cloud(cloud, out / "cohort.svg")
print("wrote", svg, "and", tsv)
