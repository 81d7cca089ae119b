import json
import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from dualqe import corpus as C
from dualqe.evaluation import (
    combined_tags,
    confusion,
    corpus_bleu,
    f1_scores,
    filter_corpus,
    format_table,
    mae_rmse,
    mcc,
    metrics_json,
    pearson,
    word_eval,
    word_level_eval,
)

B, O = C.BAD, C.OK


# -- independent oracles ----------------------------------------------------------
# Plain-Python formula evaluations; no code shared with the package.

def oracle_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def oracle_mae_rmse(a, b):
    e = [x - y for x, y in zip(a, b)]
    return sum(abs(v) for v in e) / len(e), math.sqrt(sum(v * v for v in e) / len(e))


def oracle_counts(gold, pred):
    tp = sum(1 for g, p in zip(gold, pred) if g == 1 and p == 1)
    tn = sum(1 for g, p in zip(gold, pred) if g == 0 and p == 0)
    fp = sum(1 for g, p in zip(gold, pred) if g == 0 and p == 1)
    fn = sum(1 for g, p in zip(gold, pred) if g == 1 and p == 0)
    return tp, fp, tn, fn


def oracle_mcc(gold, pred):
    tp, fp, tn, fn = oracle_counts(gold, pred)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)


def oracle_f1(gold, pred, cls):
    tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
    n_pred = sum(1 for p in pred if p == cls)
    n_gold = sum(1 for g in gold if g == cls)
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return 2 * prec * rec / (prec + rec)


def oracle_bleu(hyps, refs, max_n=4):
    num = [0] * max_n
    den = [0] * max_n
    for h, r in zip(hyps, refs):
        for n in range(1, max_n + 1):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
            for g in set(hg):
                num[n - 1] += min(hg.count(g), rg.count(g))
            den[n - 1] += len(hg)
    if any(x == 0 for x in num):
        return 0.0
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(Fraction(a, b)) for a, b in zip(num, den)) / max_n)


# -- worked examples ----------------------------------------------------------------

def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert abs(pearson([1, 2, 3], [1, 2, 4]) - 9 / math.sqrt(84)) < 1e-12
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


def test_mae_rmse_examples():
    assert mae_rmse([1, 2], [1, 2]) == (0.0, 0.0)
    assert mae_rmse([1, -1], [0, 0]) == (1.0, 1.0)
    assert mae_rmse([3, 0, 0, 0], [0, 0, 0, 0]) == (0.75, 1.5)
    with pytest.raises(ValueError):
        mae_rmse([1, 2], [1])


def test_mcc_examples():
    assert mcc([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert mcc([1, 0, 1, 0], [0, 1, 0, 1]) == -1.0
    gold = [1, 1, 1, 0, 0, 0]
    pred = [1, 1, 0, 0, 0, 1]  # tp 2, fn 1, tn 2, fp 1
    assert confusion(gold, pred) == (2, 1, 2, 1)
    assert abs(mcc(gold, pred) - 3 / 9) < 1e-12
    assert mcc([0, 0, 0], [0, 0, 0]) == 0.0
    with pytest.raises(ValueError):
        mcc([0, 1], [0])


def test_f1_examples():
    assert f1_scores([B, O], [B, O]) == (1.0, 1.0)
    f1_bad, f1_ok = f1_scores([B, B, O, O], [B, O, O, O])
    assert abs(f1_bad - 2 / 3) < 1e-12 and abs(f1_ok - 0.8) < 1e-12
    assert f1_scores([O, O], [O, O]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        f1_scores([B], [B, O])
    with pytest.raises(ValueError):
        f1_scores(["GOOD"], ["OK"])


def test_bleu_examples():
    assert corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d"]]) == pytest.approx(1.0)
    assert corpus_bleu([["x", "y", "z", "w"]], [["a", "b", "c", "d"]]) == 0.0
    assert corpus_bleu(["a b c d".split()], ["a b c e".split()]) == 0.0
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


def test_combined_tags_layout():
    flat = combined_tags([[B, O]], [[O, O, B]])
    assert len(flat) == 5
    assert flat.tolist() == [1, 0, 0, 0, 1]  # words, then gaps
    with pytest.raises(ValueError):
        combined_tags([[B, O]], [[O, O]])


def test_word_level_eval_matches_flat_oracle():
    rng = np.random.default_rng(0)
    lex = C.make_lexicon(0)
    samples = C.make_qe_samples(C.gen_parallel(0, 30, lex, 3), C.CorruptionConfig(), seed=0)
    pw = [(rng.random(len(s.word_tags)) < 0.3).astype(int) for s in samples]
    pg = [(rng.random(len(s.gap_tags)) < 0.3).astype(int) for s in samples]
    gold, pred = [], []
    for s, w, g in zip(samples, pw, pg):
        gold += [int(t == B) for t in s.gap_tags[:1]]
        pred += [int(g[0])]
        for j in range(len(w)):
            gold += [int(s.word_tags[j] == B), int(s.gap_tags[j + 1] == B)]
            pred += [int(w[j]), int(g[j + 1])]
    rep = word_level_eval(samples, pw, pg)
    assert abs(rep.mcc - oracle_mcc(gold, pred)) < 1e-12
    perfect = word_level_eval(samples, [s.word_tags for s in samples], [s.gap_tags for s in samples])
    assert perfect.mcc == pytest.approx(1.0)
    with pytest.raises(ValueError):
        word_level_eval(samples, pw[:-1], pg)


# -- random-input oracle agreement --------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    a = rng.standard_normal(n)
    b = 0.5 * a + rng.standard_normal(n)
    assert abs(pearson(a, b) - oracle_pearson(a.tolist(), b.tolist())) < 1e-10
    for got, want in zip(mae_rmse(a, b), oracle_mae_rmse(a.tolist(), b.tolist())):
        assert abs(got - want) < 1e-10
    g = rng.integers(0, 2, n).tolist()
    p = rng.integers(0, 2, n).tolist()
    assert abs(mcc(g, p) - oracle_mcc(g, p)) < 1e-10
    f_bad, f_ok = f1_scores(g, p)
    assert abs(f_bad - oracle_f1(g, p, 1)) < 1e-10 and abs(f_ok - oracle_f1(g, p, 0)) < 1e-10
    hyps = [rng.integers(0, 4, int(rng.integers(4, 12))).tolist() for _ in range(5)]
    refs = [rng.integers(0, 4, int(rng.integers(4, 12))).tolist() for _ in range(5)]
    assert abs(corpus_bleu(hyps, refs) - oracle_bleu(hyps, refs)) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_metric_invariances(seed):
    rng = np.random.default_rng(1000 + seed)
    a = rng.standard_normal(30)
    b = a + rng.standard_normal(30)
    scale, shift = float(rng.uniform(0.1, 5)), float(rng.normal())
    assert abs(pearson(2 * a + 3, b) - pearson(a, b)) < 1e-12
    assert abs(pearson(scale * a + shift, b) - pearson(a, b)) < 1e-10
    assert abs(pearson(-a, b) + pearson(a, b)) < 1e-10
    g = rng.integers(0, 2, 30)
    p = rng.integers(0, 2, 30)
    assert abs(mcc(1 - g, 1 - p) - mcc(g, p)) < 1e-12
    f_bad, f_ok = f1_scores(g, p)
    assert f1_scores(1 - g, 1 - p) == (f_ok, f_bad)


def test_word_eval_report_counts():
    rep = word_eval([1, 0, 1], [1, 1, 0])
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (1, 1, 0, 1)


# -- filtering ---------------------------------------------------------------------

def pairs_of(n):
    return [C.ParallelPair((f"s{i}",), (f"t{i}",)) for i in range(n)]


def test_filter_drop_zero_keeps_all():
    pairs = pairs_of(5)
    kept, removed, report, _ = filter_corpus(pairs, lambda ps: [0.5] * len(ps), 0.0)
    assert kept == pairs and removed == [] and report.n_removed == 0


def test_filter_removes_highest_scores():
    pairs = pairs_of(10)
    scores = [0.1, 0.9, 0.2, 0.3, 0.8, 0.0, 0.4, 0.5, 0.6, 0.7]
    corrupted = [i in (1, 2) for i in range(10)]
    kept, removed, report, got = filter_corpus(pairs, lambda ps: scores, 0.2, corrupted)
    assert removed == [pairs[1], pairs[4]]
    assert len(kept) == 8
    assert report.precision == 0.5 and report.removed_corrupted == 1 and report.kept_corrupted == 1
    np.testing.assert_array_equal(got, scores)


def test_filter_ties_stable_and_empty_pairs_flagged():
    pairs = pairs_of(4) + [SimpleNamespace(source=(), target=("t",))]
    seen = []

    def score(ps):
        seen.extend(ps)
        return [0.5] * len(ps)

    _, removed, report, scores = filter_corpus(pairs, score, 0.4)
    assert len(seen) == 4
    assert report.unscoreable == [4] and scores[4] == 1.0
    assert removed == [pairs[0], pairs[4]]
    with pytest.raises(ValueError):
        filter_corpus(pairs, score, 1.0)


# -- reports -------------------------------------------------------------------

def test_metrics_json_deterministic():
    m = {"b": np.float64(0.123456789012345), "a": [1, np.int64(2)], "c": 1 / 3}
    text = metrics_json(m)
    assert text == metrics_json(dict(reversed(list(m.items()))))
    loaded = json.loads(text)
    assert list(loaded) == ["a", "b", "c"]
    assert loaded["b"] == 0.123456789 and loaded["a"] == [1, 2]


def test_format_table():
    out = format_table([{"name": "x", "v": 0.5}], ["name", "v"])
    assert out.splitlines()[2].split() == ["x", "0.5000"]
