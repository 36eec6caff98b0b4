"""Attention-based explanations: per-stay top phrases and top-risk cohort clouds.

A phrase is the token span read by one filter at one attended position, so
it is 1, 2 or 3 tokens long. Spans running into the zero-padded edge of the
narrative are trimmed to the real tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .model import WIDTHS, AttentionTrace
from .textpipe import PAD, UNK, EncodedNarrative, Vocab

CONTEXT = 2
SVG_SCHEMA = "cnnattn-cloud/1"
SIDECAR_SCHEMA = "cnnattn-cloud-sidecar/1"


class ExplainInputError(ValueError):
    pass


@dataclass(frozen=True)
class PhraseWeight:
    phrase: str
    context: str
    weight: float
    source: tuple  # (stay_id, position, filter_width)

    @property
    def tokens(self) -> tuple:
        return tuple(self.phrase.split(" "))


@dataclass
class CohortCloud:
    outcome: str
    stay_ids: list
    weights: dict  # phrase -> aggregated weight
    contributions: dict = field(default_factory=dict)  # phrase -> [(stay_id, position, weight)]
    contexts: dict = field(default_factory=dict)

    def phrases(self) -> list[PhraseWeight]:
        """Phrases by aggregated weight, heaviest first (ties by text)."""
        out = []
        for p in sorted(self.weights, key=lambda p: (-self.weights[p], p)):
            stay, pos, _ = max(self.contributions[p], key=lambda c: (c[2], -c[1]))
            out.append(PhraseWeight(p, self.contexts.get(p, p), self.weights[p], (stay, pos, len(p.split(" ")))))
        return out


def model_tokens(narrative: EncodedNarrative, vocab: Vocab) -> list[str]:
    """The tokens the model actually read, OOV words shown as UNK."""
    return [vocab.itos[i] for i in narrative.ids[:narrative.n_valid]]


def _span(i: int, length: int, n_valid: int) -> tuple[int, int, int] | None:
    w, start = WIDTHS[i // length], i % length
    if start >= n_valid:
        return None
    return w, start, min(start + w, n_valid)


def _context(tokens: Sequence[str], lo: int, hi: int) -> str:
    left = tokens[max(0, lo - CONTEXT):lo]
    right = tokens[hi:hi + CONTEXT]
    return " ".join([*left, "[" + " ".join(tokens[lo:hi]) + "]", *right])


def _is_blank(span: Sequence[str]) -> bool:
    return all(t in (PAD, UNK) for t in span)


def top_phrases(trace: AttentionTrace, tokens: Sequence[str], k: int = 10,
                stay_id: int | None = None) -> list[PhraseWeight]:
    """The k most attended spans of one narrative.

    ``tokens`` are the narrative tokens as the model saw them (see
    ``model_tokens``). Ties in alpha go to the earlier filter position.
    """
    n_valid = min(trace.n_real_tokens, trace.length, len(tokens))
    alpha = np.asarray(trace.alpha)
    # stable sort on -alpha keeps position order within ties
    order = np.argsort(-alpha, kind="stable")
    seen, out = set(), []
    for i in order:
        if len(out) >= k or alpha[i] <= 0:
            break
        sp = _span(int(i), trace.length, n_valid)
        if sp is None:
            continue
        w, lo, hi = sp
        if (lo, hi) in seen:
            continue
        span = tokens[lo:hi]
        if _is_blank(span):
            continue
        seen.add((lo, hi))
        out.append(PhraseWeight(" ".join(span), _context(tokens, lo, hi), float(alpha[i]), (stay_id, int(i), w)))
    return out


def select_cohort(stay_ids: Sequence[int], probabilities: Sequence[float], top_frac: float = 0.05) -> list[int]:
    """ceil(top_frac * n) highest-risk stays; equal probabilities go to the lower stay id."""
    n = len(stay_ids)
    if n == 0:
        raise ExplainInputError("no scored stays to select a cohort from")
    if not 0 < top_frac <= 1:
        raise ExplainInputError(f"top_frac must be in (0, 1], got {top_frac}")
    m = math.ceil(top_frac * n - 1e-9)
    ranked = sorted(zip(probabilities, stay_ids), key=lambda t: (-t[0], t[1]))
    return [s for _, s in ranked[:max(m, 1)]]


def cohort_cloud(stay_ids: Sequence[int], probabilities: Sequence[float], traces: dict, tokens: dict,
                 outcome: str, top_frac: float = 0.05, per_patient_k: int = 3) -> CohortCloud:
    """Aggregate the top phrases of the highest-risk stays.

    ``traces`` and ``tokens`` map stay id to AttentionTrace and model tokens.
    Every occurrence of a selected phrase inside the cohort adds the
    attention weight at that position.
    """
    cohort = select_cohort(stay_ids, probabilities, top_frac)
    keys = []
    for s in cohort:
        for pw in top_phrases(traces[s], tokens[s], per_patient_k, s):
            if pw.phrase not in keys:
                keys.append(pw.phrase)
    wanted = {tuple(p.split(" ")): p for p in keys}
    contrib = {p: [] for p in keys}
    contexts = {}
    best = {}
    for s in cohort:
        tr, toks = traces[s], tokens[s]
        n_valid = min(tr.n_real_tokens, tr.length, len(toks))
        alpha = np.asarray(tr.alpha)
        for i in np.flatnonzero(alpha > 0):
            sp = _span(int(i), tr.length, n_valid)
            if sp is None:
                continue
            _, lo, hi = sp
            p = wanted.get(tuple(toks[lo:hi]))
            if p is None:
                continue
            a = float(alpha[i])
            contrib[p].append((s, int(i), a))
            if a > best.get(p, -1.0):
                best[p], contexts[p] = a, _context(toks, lo, hi)
    weights = {p: math.fsum(c[2] for c in contrib[p]) for p in keys}
    return CohortCloud(outcome, cohort, weights, contrib, contexts)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def font_sizes(weights: Sequence[float], min_size: float = 12.0, max_size: float = 48.0) -> list[float]:
    """Linear map from the weight range onto [min_size, max_size]."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = float(w.min()), float(w.max())
    if hi == lo:
        return [max_size] * len(w)
    return [min_size + (x - lo) / (hi - lo) * (max_size - min_size) for x in w]


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".tsv")


def render_cloud(cloud: Sequence[PhraseWeight] | CohortCloud, path, seed: int = 0, width: int = 800,
                 min_size: float = 12.0, max_size: float = 48.0) -> tuple[Path, Path]:
    """Write an SVG cloud and its TSV sidecar; returns both paths.

    Layout is a left-to-right flow of the phrases in a seeded order, so the
    output is byte-identical for equal inputs and seed.
    """
    phrases = cloud.phrases() if isinstance(cloud, CohortCloud) else list(cloud)
    if not phrases:
        raise ExplainInputError("cannot render an empty cloud")
    sizes = font_sizes([p.weight for p in phrases], min_size, max_size)
    order = np.random.default_rng(seed).permutation(len(phrases))
    pad = 10.0
    x, y, row_h = pad, pad, 0.0
    items = []
    for j in order:
        p, size = phrases[j], sizes[j]
        # rough advance for a sans-serif face
        w = 0.6 * size * len(p.phrase)
        if x > pad and x + w > width - pad:
            x, y, row_h = pad, y + row_h + 0.25 * row_h, 0.0
        row_h = max(row_h, size)
        items.append((x, y + size, size, p.phrase))
        x += w + 0.5 * size
    height = y + row_h + 0.25 * row_h + pad
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height:.1f}" '
        f'viewBox="0 0 {width} {height:.1f}">',
        f"<!-- {SVG_SCHEMA} -->",
    ]
    for x, y, size, text in items:
        lines.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size:.2f}" text-anchor="start" '
                     f'font-family="sans-serif">{escape(text)}</text>')
    lines.append("</svg>")
    out = Path(path)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    side = sidecar_path(out)
    write_sidecar(phrases, side)
    return out, side


def write_sidecar(phrases: Sequence[PhraseWeight], path) -> None:
    rows = [f"# {SIDECAR_SCHEMA}", "rank\tphrase\tweight\tcontext"]
    for r, p in enumerate(phrases, 1):
        rows.append(f"{r}\t{p.phrase}\t{p.weight!r}\t{p.context}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_sidecar(path) -> list[tuple[int, str, float, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {SIDECAR_SCHEMA}":
        raise ExplainInputError(f"{path}: not a cloud sidecar")
    out = []
    for line in lines[2:]:
        r, phrase, w, ctx = line.split("\t")
        out.append((int(r), phrase, float(w), ctx))
    return out
