"""QE metrics, corpus BLEU and QE-driven corpus filtering."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import BAD, OK


def _tag_array(tags):
    """Accept OK/BAD strings or 0/1 ints (BAD == 1)."""
    arr = np.asarray(tags)
    if arr.dtype.kind in "US":
        unknown = set(arr.tolist()) - {OK, BAD}
        if unknown:
            raise ValueError(f"unknown tags {sorted(unknown)}")
        return (arr == BAD).astype(np.int64)
    return arr.astype(np.int64)


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    if a.size < 2:
        raise ValueError("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    va, vb = float(da @ da), float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ValueError("pearson is undefined when either input has zero variance")
    r = float(da @ db) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, r))


def mae_rmse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("mae_rmse needs two non-empty sequences of equal length")
    err = a - b
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


@dataclass
class SentenceEvalReport:
    pearson: float
    mae: float
    rmse: float


def sentence_eval(pred, gold):
    mae, rmse = mae_rmse(pred, gold)
    return SentenceEvalReport(pearson(pred, gold), mae, rmse)


def confusion(gold, pred):
    """(TP, FP, TN, FN) with BAD as the positive class."""
    g = _tag_array(gold)
    p = _tag_array(pred)
    if g.shape != p.shape:
        raise ValueError(f"tag sequences differ in length: {g.size} vs {p.size}")
    tp = int(np.sum((g == 1) & (p == 1)))
    fp = int(np.sum((g == 0) & (p == 1)))
    tn = int(np.sum((g == 0) & (p == 0)))
    fn = int(np.sum((g == 1) & (p == 0)))
    return tp, fp, tn, fn


def _mcc_counts(tp, fp, tn, fn):
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def mcc(gold, pred):
    """Matthews correlation; 0 when any marginal is empty."""
    return _mcc_counts(*confusion(gold, pred))


def _f1(tp, fp, fn):
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_scores(gold, pred):
    """(F1 of BAD, F1 of OK); a class with no true positives scores 0."""
    tp, fp, tn, fn = confusion(gold, pred)
    return _f1(tp, fp, fn), _f1(tn, fn, fp)


@dataclass
class WordEvalReport:
    mcc: float
    f1_bad: float
    f1_ok: float
    tp: int
    fp: int
    tn: int
    fn: int


def word_eval(gold, pred):
    tp, fp, tn, fn = confusion(gold, pred)
    return WordEvalReport(_mcc_counts(tp, fp, tn, fn), _f1(tp, fp, fn), _f1(tn, fn, fp), tp, fp, tn, fn)


def combined_tags(word_tags, gap_tags):
    """Per sentence: word tags followed by gap tags, all sentences concatenated."""
    if len(word_tags) != len(gap_tags):
        raise ValueError("word and gap tag lists cover different numbers of sentences")
    out = []
    for i, (w, g) in enumerate(zip(word_tags, gap_tags)):
        w, g = _tag_array(w), _tag_array(g)
        if len(g) != len(w) + 1:
            raise ValueError(f"sentence {i}: {len(w)} word tags need {len(w) + 1} gap tags, got {len(g)}")
        out.append(w)
        out.append(g)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def word_level_eval(samples, pred_word_tags, pred_gap_tags):
    """Combined word+gap evaluation of predictions against ``QESample`` labels."""
    if len(samples) != len(pred_word_tags) or len(samples) != len(pred_gap_tags):
        raise ValueError("predictions are not aligned with samples")
    gold = combined_tags([s.word_tags for s in samples], [s.gap_tags for s in samples])
    pred = combined_tags(pred_word_tags, pred_gap_tags)
    return word_eval(gold, pred)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4):
    """Unsmoothed corpus BLEU in [0, 1]; any zero n-gram precision gives 0."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not references:
        raise ValueError("corpus_bleu needs at least one reference")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


# -- filtering ---------------------------------------------------------------

@dataclass
class FilterReport:
    n_pairs: int
    n_removed: int
    drop_fraction: float
    unscoreable: list
    precision: float | None = None
    recall: float | None = None
    removed_corrupted: int | None = None
    removed_clean: int | None = None
    kept_corrupted: int | None = None
    kept_clean: int | None = None

    def to_dict(self):
        return asdict(self)


def filter_corpus(pairs, score_fn, drop_fraction, corrupted=None):
    """Remove the ``floor(drop_fraction * n)`` pairs with the highest predicted HTER.

    ``score_fn(pairs)`` returns one HTER estimate per pair; empty pairs are
    not passed to it, and are scored 1.0 and listed in ``unscoreable``.
    Ties keep corpus order (stable sort).  Returns (kept, removed, report,
    scores).
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must lie in [0, 1)")
    n = len(pairs)
    scores = np.ones(n)
    bad = [i for i, p in enumerate(pairs) if not p.source or not p.target]
    bad_set = set(bad)
    good = [i for i in range(n) if i not in bad_set]
    if good:
        scores[good] = np.asarray(score_fn([pairs[i] for i in good]), dtype=np.float64)
    n_drop = int(math.floor(drop_fraction * n))
    order = np.argsort(-scores, kind="stable")
    removed_idx = set(order[:n_drop].tolist())
    kept = [p for i, p in enumerate(pairs) if i not in removed_idx]
    removed = [p for i, p in enumerate(pairs) if i in removed_idx]
    report = FilterReport(n, n_drop, drop_fraction, bad)
    if corrupted is not None:
        flags = np.asarray(corrupted, dtype=bool)
        mask = np.zeros(n, dtype=bool)
        mask[list(removed_idx)] = True
        report.removed_corrupted = int(np.sum(mask & flags))
        report.removed_clean = int(np.sum(mask & ~flags))
        report.kept_corrupted = int(np.sum(~mask & flags))
        report.kept_clean = int(np.sum(~mask & ~flags))
        report.precision = report.removed_corrupted / n_drop if n_drop else None
        report.recall = report.removed_corrupted / int(flags.sum()) if flags.any() else None
    return kept, removed, report, scores


# -- reports -----------------------------------------------------------------

def metrics_json(metrics):
    """Deterministic JSON text for a metrics mapping."""
    return json.dumps(_plain(metrics), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float):
        return round(obj, 10)
    return obj


def format_table(rows, columns):
    """Plain-text table; ``rows`` are dicts, floats shown with 4 decimals."""
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body)
    return "\n".join(lines)
