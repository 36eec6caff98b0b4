"""Attention-augmented CNN risk models over ICU clinical narratives."""

from .corpus import OUTCOMES, CohortRecord, build_cohort, load_tables, read_cohort, write_cohort
from .embed import EmbeddingMatrix, load_embeddings, save_embeddings, train_cbow, train_starspace
from .explain import cohort_cloud, render_cloud, top_phrases
from .metrics import aupr, auroc, brute_force_oracle
from .model import forward_attn, forward_max, init_params, load_checkpoint, predict, save_checkpoint
from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic
from .textpipe import Vocab, build_vocab, encode, normalize, tokenize
from .trainer import RunResult, TrainConfig, make_folds, run_experiment, train_fold

__version__ = "0.1.0"
