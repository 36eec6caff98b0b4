"""Command-line surface: ``cnnattn {etl,folds,embed,train,explain}``.

Settings resolve as command-line flag > environment variable > config file >
built-in default. Environment variables use the ``CNNATTN_`` prefix and the
upper-cased setting name (``CNNATTN_BATCH_SIZE=16``). The config file is INI
with one ``[cnnattn]`` section::

    [cnnattn]
    format = 1
    batch_size = 32
    dropout = 0.2, 0.3, 0.3

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .corpus import OUTCOMES, SchemaError, build_cohort, load_tables, prevalence, read_cohort, write_cohort
from .embed import CBOW_DIM, STARSPACE_DIM, EmbeddingFormatError, load_embeddings, save_embeddings
from .explain import ExplainInputError, cohort_cloud, model_tokens, render_cloud, sidecar_path, top_phrases
from .metrics import UndefinedMetricError
from .model import HEADS, ModelInputError, load_checkpoint, predict
from .synthetic import SyntheticSpec, write_synthetic
from .textpipe import Vocab, encode
from .trainer import (EMBEDDING_METHODS, FoldData, LeakageError, TrainConfig, check_leakage, load_folds,
                      make_folds, prepare_fold, run_experiment, save_folds, tokenize_cohort)

ENV_PREFIX = "CNNATTN_"
CONFIG_SECTION = "cnnattn"
CONFIG_FORMAT = "1"
MANIFEST_SCHEMA = "cnnattn-manifest/1"
STATS_SCHEMA = "cnnattn-etl-stats/1"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cnnattn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means a data error here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# settings
# --------------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_DEFAULTS = TrainConfig()
_HELP = {
    "batch_size": "mini-batch size",
    "lr": "Adam learning rate",
    "patience": "early-stopping patience in epochs without validation AU-ROC gain",
    "max_epochs": "hard cap on training epochs",
    "seed": "run seed; every random stream derives from it",
    "dropout": "dropout after embedding, convolution and pooling (comma list)",
    "n_filters": "filters per width (widths 1, 2, 3)",
    "embed_dim": "embedding size",
    "embed_epochs": "embedding training epochs",
    "min_doc_freq": "minimum document frequency for the vocabulary",
    "max_len": "narrative length limit in tokens",
    "truncate_side": "keep the head or the tail of long narratives",
    "freeze_embeddings": "do not fine-tune the embedding layer",
    "shared_embeddings": "train one embedding on every subject (leaks test text; desk-scale shortcut)",
    "std": "fold standard deviation: population or sample",
    "n_folds": "number of cross-validation folds",
    "dtype": "training precision: float64 or float32",
}


def _parse_value(name: str, raw):
    default = getattr(_DEFAULTS, name)
    if isinstance(raw, str):
        raw = raw.strip()
    if name == "dropout":
        vals = tuple(float(x) for x in str(raw).replace(" ", "").split(",") if x)
        if len(vals) != 3:
            raise UsageError("dropout needs three comma-separated rates")
        return vals
    if name == "embed_dim":
        return None if raw in (None, "", "none", "None") else int(raw)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(p, encoding="utf-8")
    if not cp.has_section(CONFIG_SECTION):
        raise UsageError(f"{path}: missing [{CONFIG_SECTION}] section")
    sec = dict(cp[CONFIG_SECTION])
    fmt = sec.pop("format", None)
    if fmt != CONFIG_FORMAT:
        raise UsageError(f"{path}: unsupported config format {fmt!r} (expected {CONFIG_FORMAT})")
    unknown = sorted(set(sec) - set(_TRAIN_FIELDS) - {"jobs"})
    if unknown:
        raise UsageError(f"{path}: unknown settings {', '.join(unknown)}")
    return sec


def resolve_settings(args, names) -> tuple[dict, dict]:
    """Values and their sources for ``names`` under flag > env > file > default."""
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    values, sources = {}, {}
    for name in names:
        cli = getattr(args, name, None)
        env = os.environ.get(ENV_PREFIX + name.upper())
        try:
            if cli is not None:
                values[name], sources[name] = _parse_value(name, cli), "flag"
            elif env is not None:
                values[name], sources[name] = _parse_value(name, env), "env"
            elif name in file_vals:
                values[name], sources[name] = _parse_value(name, file_vals[name]), "file"
            else:
                values[name] = 1 if name == "jobs" else getattr(_DEFAULTS, name)
                sources[name] = "default"
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {exc}") from None
    return values, sources


def _print_settings(values: dict, sources: dict) -> None:
    for k in sorted(values):
        print(f"setting {k} = {values[k]!r} ({sources[k]})", file=sys.stderr)


# --------------------------------------------------------------------------
# files and manifests
# --------------------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _claim_outputs(paths, force: bool) -> None:
    taken = [str(p) for p in paths if Path(p).exists()]
    if taken and not force:
        raise UsageError(f"refusing to overwrite {', '.join(taken)} (use --force)")
    for p in paths:
        Path(p).parent.mkdir(parents=True, exist_ok=True)


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(path, args, settings: dict, inputs, outputs, timings: dict, extra=None) -> None:
    doc = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "command": args.command,
        "argv": args.argv,
        "settings": {k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()},
        "seed": settings.get("seed"),
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "timings": {k: round(v, 3) for k, v in timings.items()},
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{path}: not a run manifest")
    return doc


def _load_fold(path, k: int):
    folds = load_folds(_need_file(path, "fold file"))
    if not 0 <= k < len(folds):
        raise UsageError(f"fold {k} out of range; {path} has {len(folds)} folds")
    return folds, folds[k]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_etl(args) -> int:
    settings, sources = resolve_settings(args, ["seed"])
    out = Path(args.out)
    stats_path = out.with_name(out.name + ".stats.json")
    outputs = [out, stats_path]
    _claim_outputs(outputs + [manifest_path(out)], args.force)
    t0 = time.perf_counter()
    inputs = []
    if args.synthetic:
        spec_path = _need_file(args.synthetic, "synthetic spec")
        inputs.append(spec_path)
        spec = SyntheticSpec.from_file(spec_path)
        if sources["seed"] != "default":
            spec = dataclasses.replace(spec, seed=settings["seed"])
        elif spec.seed != settings["seed"]:
            sources["seed"] = "spec file"
        settings["seed"] = spec.seed
    _print_settings(settings, sources)
    if args.synthetic:
        with tempfile.TemporaryDirectory() as tmp:
            write_synthetic(spec, tmp)
            tables = load_tables(tmp)
    else:
        mimic = Path(args.mimic_dir)
        if not mimic.is_dir():
            raise UsageError(f"MIMIC-III directory not found: {mimic}")
        tables = load_tables(mimic)
        inputs += sorted(p for p in mimic.iterdir() if p.suffix.lower() in (".csv", ".gz"))
    t_load = time.perf_counter() - t0
    records, funnel = build_cohort(tables)
    prev = prevalence(records)
    write_cohort(records, out)
    stats = {"schema": STATS_SCHEMA, "funnel": funnel, "prevalence": prev, "n_stays": len(records),
             "n_subjects": len({r.subject_id for r in records})}
    stats_path.write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    print("filter funnel")
    for step, n in funnel.items():
        print(f"  {step:<16}{n:>8}")
    print("label prevalence")
    for k, v in prev.items():
        print(f"  {k:<16}{v:>8}  ({v / max(len(records), 1):.3f})")
    write_manifest(manifest_path(out), args, settings, inputs, outputs,
                   {"load": t_load, "total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_folds(args) -> int:
    settings, sources = resolve_settings(args, ["seed", "n_folds"])
    _print_settings(settings, sources)
    cohort = _need_file(args.cohort, "cohort file")
    out = Path(args.out)
    _claim_outputs([out, manifest_path(out)], args.force)
    t0 = time.perf_counter()
    records = read_cohort(cohort)
    try:
        folds = make_folds([r.subject_id for r in records], settings["seed"], settings["n_folds"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_folds(folds, out)
    write_manifest(manifest_path(out), args, settings, [cohort], [out], {"total": time.perf_counter() - t0})
    print(f"{len(folds)} folds over {len({r.subject_id for r in records})} subjects -> {out}")
    return EXIT_OK


def _subject_set_hash(subjects) -> str:
    return hashlib.sha256(",".join(map(str, sorted(subjects))).encode()).hexdigest()


def cmd_embed(args) -> int:
    names = ["seed", "embed_dim", "embed_epochs", "min_doc_freq", "max_len", "truncate_side"]
    settings, sources = resolve_settings(args, names)
    settings["embedding"] = args.method
    _print_settings(settings, {**sources, "embedding": "flag"})
    cohort = _need_file(args.cohort, "cohort file")
    folds_path = _need_file(args.folds, "fold file")
    _, fold = _load_fold(folds_path, args.fold)
    out = Path(args.out)
    vocab_path = out.with_suffix(".vocab")
    _claim_outputs([out, vocab_path, manifest_path(out)], args.force)
    t0 = time.perf_counter()
    records = read_cohort(cohort)
    config = TrainConfig(**{k: v for k, v in settings.items() if k in _TRAIN_FIELDS})
    data = prepare_fold(records, tokenize_cohort(records), fold, config)
    save_embeddings(data.embedding, data.vocab, out, binary=args.binary)
    data.vocab.save(vocab_path)
    write_manifest(manifest_path(out), args, settings, [cohort, folds_path], [out, vocab_path],
                   {"total": time.perf_counter() - t0},
                   {"fold_index": fold.fold_index,
                    "excluded_test_subjects_sha256": _subject_set_hash(fold.test),
                    "embedding_subjects": sorted(data.embedding_subjects)})
    print(f"{args.method} embedding of {data.embedding.n_rows} rows x {data.embedding.dim} -> {out}")
    return EXIT_OK


def _fold_data_from_files(pattern: str, records, tokens, folds, config: TrainConfig) -> dict:
    cache = {}
    for f in folds:
        path = Path(pattern.format(fold=f.fold_index))
        _need_file(path, "embedding file")
        vocab = Vocab.load(_need_file(path.with_suffix(".vocab"), "embedding vocabulary"), config.min_doc_freq)
        emb = load_embeddings(path, vocab)
        mpath = manifest_path(path)
        if mpath.is_file():
            subjects = frozenset(read_manifest(mpath)["embedding_subjects"])
        elif config.shared_embeddings:
            subjects = frozenset(r.subject_id for r in records)
        else:
            raise DataError(f"{path}: no manifest, so test-subject exclusion cannot be verified")
        if not config.shared_embeddings:
            check_leakage(f, records, subjects)
        encoded = [encode(t, vocab, config.max_len, config.truncate_side) for t in tokens]
        cache[f.fold_index] = FoldData(f, vocab, emb, encoded, subjects)
    return cache


def cmd_train(args) -> int:
    names = [n for n in _TRAIN_FIELDS if n not in ("outcome", "head", "embedding")] + ["jobs"]
    settings, sources = resolve_settings(args, names)
    settings.update(outcome=args.outcome, head=args.head, embedding=args.embedding_method)
    sources.update(outcome="flag", head="flag", embedding="flag")
    _print_settings(settings, sources)
    jobs = settings.pop("jobs")
    cohort = _need_file(args.cohort, "cohort file")
    folds_path = _need_file(args.folds, "fold file")
    folds = load_folds(folds_path)
    out = Path(args.out)
    report, table = out / "report.json", out / "report.txt"
    _claim_outputs([report, table], args.force)
    config = TrainConfig(**settings)
    t0 = time.perf_counter()
    records = read_cohort(cohort)
    tokens = tokenize_cohort(records)
    inputs = [cohort, folds_path]
    fold_data = None
    if args.embedding:
        fold_data = _fold_data_from_files(args.embedding, records, tokens, folds, config)
        for f in folds:
            p = Path(args.embedding.format(fold=f.fold_index))
            inputs += [p] if p not in inputs else []
        methods = {d.embedding.method for d in fold_data.values()}
        if methods != {config.embedding}:
            raise UsageError(f"embedding files were trained with {sorted(methods)}, "
                             f"but --embedding-method is {config.embedding}")
    result = run_experiment(records, config, folds, fold_data, tokens, checkpoint_dir=out, jobs=jobs)
    result.write(report)
    table.write_text(result.table())
    sys.stdout.write(result.table())
    outputs = [report, table] + [out / f.checkpoint for f in result.folds if f.checkpoint]
    write_manifest(out / "manifest.json", args, {**settings, "jobs": jobs}, inputs, outputs,
                   {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_explain(args) -> int:
    settings, sources = resolve_settings(args, ["seed"])
    _print_settings(settings, sources)
    ckpt = _need_file(args.checkpoint, "checkpoint")
    vocab_path = _need_file(ckpt.with_suffix(".vocab"), "checkpoint vocabulary")
    cohort = _need_file(args.cohort, "cohort file")
    folds_path = _need_file(args.folds, "fold file")
    if args.mode == "individual" and args.stay is None:
        raise UsageError("--mode individual needs --stay STAY_ID")
    _, fold = _load_fold(folds_path, args.fold)
    out = Path(args.out)
    _claim_outputs([out, sidecar_path(out), manifest_path(out)], args.force)
    t0 = time.perf_counter()
    params, extra = load_checkpoint(ckpt)
    if params.head != "attn":
        raise UsageError("explanations need an attention checkpoint (--head attn)")
    outcome = args.outcome or extra.get("outcome")
    if extra.get("outcome") and outcome != extra["outcome"]:
        raise UsageError(f"checkpoint was trained for {extra['outcome']}, not {outcome}")
    if extra.get("fold_index") not in (None, fold.fold_index):
        raise UsageError(f"checkpoint belongs to fold {extra['fold_index']}, not {fold.fold_index}")
    vocab = Vocab.load(vocab_path)
    if vocab.hash != params.vocab_hash:
        raise DataError(f"{vocab_path} does not match the checkpoint vocabulary")
    records = read_cohort(cohort)
    test = [r for r in records if r.subject_id in fold.test]
    ids = [r.icustay_id for r in test]
    if args.mode == "individual" and args.stay not in ids:
        raise UsageError(f"stay {args.stay} is not in the test set of fold {fold.fold_index}")
    if args.mode == "individual":
        test = [r for r in test if r.icustay_id == args.stay]
    max_len = extra.get("max_len", TrainConfig().max_len)
    side = extra.get("truncate_side", "head")
    encoded = [encode(t, vocab, max_len, side) for t in tokenize_cohort(test)]
    preds = predict(params, encoded)
    traces = {r.icustay_id: p.trace for r, p in zip(test, preds)}
    toks = {r.icustay_id: model_tokens(x, vocab) for r, x in zip(test, encoded)}
    if args.mode == "individual":
        cloud = top_phrases(traces[args.stay], toks[args.stay], args.k, args.stay)
        selected = [args.stay]
    else:
        cloud = cohort_cloud([r.icustay_id for r in test], [p.probability for p in preds], traces, toks,
                             outcome, args.top_frac, args.per_patient_k)
        selected = cloud.stay_ids
    svg, side_path = render_cloud(cloud, out, seed=settings["seed"])
    write_manifest(manifest_path(out), args, {**settings, "outcome": outcome, "mode": args.mode},
                   [ckpt, vocab_path, cohort, folds_path], [svg, side_path],
                   {"total": time.perf_counter() - t0}, {"stays": selected})
    print(f"{args.mode} cloud over {len(selected)} stay(s) -> {svg}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--seed", type=int, help=f"run seed (default: {_DEFAULTS.seed})")
    p.add_argument("--config", help="INI config file with a [cnnattn] section (format = 1)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_train_flags(p, names) -> None:
    for name in names:
        flag = "--" + name.replace("_", "-")
        default = getattr(_DEFAULTS, name)
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        if name == "embed_dim":
            shown = f"{CBOW_DIM} for cbow, {STARSPACE_DIM} for starspace"
        if isinstance(default, bool):
            p.add_argument(flag, action="store_const", const=True, default=None,
                           help=f"{_HELP[name]} (default: off)")
        else:
            p.add_argument(flag, dest=name, default=None, metavar=name.upper(),
                           help=f"{_HELP[name]} (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnnattn", description=__doc__.split("\n\n")[0],
                     epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"cnnattn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("etl", help="build the ICU-stay cohort file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mimic-dir", help="directory holding the MIMIC-III CSV tables")
    src.add_argument("--synthetic", metavar="SPEC", help="JSON synthetic-corpus spec")
    p.add_argument("--out", required=True, help="cohort file to write (JSON lines)")
    _add_common(p)
    p.set_defaults(func=cmd_etl)

    p = sub.add_parser("folds", help="split subjects into cross-validation folds")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="fold definition file (JSON)")
    _add_train_flags(p, ["n_folds"])
    _add_common(p)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("embed", help="train word embeddings without one fold's test subjects")
    p.add_argument("--method", required=True, choices=EMBEDDING_METHODS)
    p.add_argument("--cohort", required=True)
    p.add_argument("--folds", required=True, help="fold definition file from 'cnnattn folds'")
    p.add_argument("--fold", required=True, type=int, help="fold index whose test subjects are excluded")
    p.add_argument("--out", required=True, help="embedding file; the vocabulary goes next to it")
    p.add_argument("--binary", action="store_true", help="write float64 rows instead of text")
    _add_train_flags(p, ["embed_dim", "embed_epochs", "min_doc_freq", "max_len", "truncate_side"])
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="cross-validated training and test evaluation",
                       description="Train one model per fold with early stopping and report AU-ROC/AU-PR.")
    p.add_argument("--outcome", required=True, choices=OUTCOMES)
    p.add_argument("--head", required=True, choices=HEADS)
    p.add_argument("--cohort", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--embedding-method", default="cbow", choices=EMBEDDING_METHODS,
                   help="embedding algorithm (default: cbow)")
    p.add_argument("--embedding", metavar="FILE",
                   help="pretrained embedding file; '{fold}' in the name is replaced per fold. "
                        "Without it embeddings are trained in-process per fold.")
    p.add_argument("--out", required=True, help="directory for the report and checkpoints")
    p.add_argument("--jobs", type=int, default=None, help="folds trained in parallel (default: 1)")
    _add_train_flags(p, [n for n in _TRAIN_FIELDS if n not in ("outcome", "head", "embedding", "seed")])
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="attention phrase clouds for one stay or the top-risk cohort")
    p.add_argument("--checkpoint", required=True, help="foldK.ckpt written by 'cnnattn train'")
    p.add_argument("--cohort", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", required=True, type=int)
    p.add_argument("--outcome", choices=OUTCOMES, help="defaults to the checkpoint's outcome")
    p.add_argument("--mode", required=True, choices=("individual", "cohort"))
    p.add_argument("--stay", type=int, help="ICU stay id for individual mode")
    p.add_argument("--k", type=int, default=10, help="phrases in an individual cloud (default: 10)")
    p.add_argument("--top-frac", type=float, default=0.05, help="cohort fraction by risk (default: 0.05)")
    p.add_argument("--per-patient-k", type=int, default=3, help="phrases per cohort member (default: 3)")
    p.add_argument("--out", required=True, help="SVG file; the TSV sidecar goes next to it")
    _add_common(p)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cnnattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, LeakageError, UndefinedMetricError, ExplainInputError,
            ModelInputError, EmbeddingFormatError) as exc:
        print(f"cnnattn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad setting values surface from TrainConfig validation
        print(f"cnnattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"cnnattn {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
