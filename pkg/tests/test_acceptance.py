"""Acceptance suite: one test per criterion, at the stated tolerances.

The summary printed at the end of the run lists every criterion with PASS or
FAIL.  Criteria 7, 8, 9 and 11 share one desk-scale training run of the
default configuration (see ``trained_run`` in conftest).
"""

import itertools
import json
import time

import numpy as np
import pytest

from dualqe import corpus as C
from dualqe import editdist
from dualqe import pipeline as P
from dualqe.cli import main as cli_main
from dualqe.estimator import EstimatorConfig, EstimatorModel, sentence_scores, topk_pool
from dualqe.evaluation import corpus_bleu, f1_scores, mae_rmse, mcc, pearson
from dualqe.features import assemble_nmt_features, assemble_xlm_features, feature_width
from dualqe.nmt import DUAL, PRIMAL, DualNMTPredictor, NMTConfig, UnifiedBlock, responsibility, teacher_forced_accuracy
from dualqe.nn import AttentionWeights, BiGRU, Parameter, Tensor, grad_check, multi_head_attention
from dualqe.nn import tensor as T
from dualqe.nn.tensor import no_grad
from dualqe.xlm import XLMConfig, XLMEncoder
from test_corpus import MT, PE, brute_levenshtein
from test_evaluation import oracle_bleu, oracle_f1, oracle_mae_rmse, oracle_mcc, oracle_pearson
from test_nmt import skip_branch_block
from test_nn import UNARY


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# -- 1 --------------------------------------------------------------------------

def gradient_cases(rng):
    def p(*shape):
        return Parameter(rng.standard_normal(shape))

    cases = {}
    for name, fn in UNARY.items():
        x = p(3, 4)
        w = rng.standard_normal(fn(Tensor(x.data)).shape)
        cases[f"unary:{name}"] = (lambda fn=fn, x=x, w=w: (fn(x) * w).sum(), [x])
    a, b = p(3, 4), p(4)
    for name, fn in {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b,
                     "div": lambda: a / (b * b + 1.0)}.items():
        w = rng.standard_normal((3, 4))
        cases[f"binary:{name}"] = (lambda fn=fn, w=w: (fn() * w).sum(), [a, b])
    m1, m2 = p(2, 3, 4), p(4, 5)
    cases["matmul"] = (lambda: (T.matmul(m1, m2) ** 2).sum(), [m1, m2])
    x, g, bb = p(3, 5), p(5), p(5)
    wl = rng.standard_normal((3, 5))
    cases["layer_norm"] = (lambda: (T.layer_norm(x, g, bb, 1e-5) * wl).sum(), [x, g, bb])
    c1, c2, table = p(2, 3), p(2, 3), p(5, 3)
    idx = np.argsort(rng.standard_normal((2, 3)), axis=0)
    cases["concat_stack_embedding_take"] = (
        lambda: ((T.concat([c1, c2], 0) * T.stack([c1, c2], 0).reshape(4, 3)) ** 2).sum()
        + (T.embedding(table, np.array([[0, 4, 4]])) ** 2).sum() + T.take_along_axis(c1, idx, 0).sum(),
        [c1, c2, table])
    att = AttentionWeights(4, 2, rng).astype(np.float64)
    q, kv = p(3, 4), p(5, 4)
    amask = np.zeros((3, 5), dtype=bool)
    amask[:, -1] = True
    cases["attention"] = (lambda: (multi_head_attention(q, kv, kv, att, amask) ** 2).sum(), [q, kv, *att.parameters()])
    gru = BiGRU(3, 2, rng).astype(np.float64)
    gx = p(4, 3)
    gw = rng.standard_normal((4, 4))
    cases["bigru"] = (lambda: (gru(gx) * gw).sum(), [gx, *gru.parameters()])
    tk = p(2, 5, 3)
    tw = rng.standard_normal((2, 3))
    cases["topk_pool"] = (lambda: (topk_pool(tk, 3, "mean") * tw).sum(), [tk])
    for mode in ("encode", "decode"):
        block = UnifiedBlock(4, 2, 6, rng).astype(np.float64)
        bx, ctx = p(3, 4), p(2, 4)
        bw = rng.standard_normal((3, 4))
        cmask = np.triu(np.ones((3, 3), dtype=bool), 1)
        params = [bx, *block.parameters()] + ([ctx] if mode == "decode" else [])
        cases[f"unified_block:{mode}"] = (
            lambda block=block, bx=bx, ctx=ctx, bw=bw, cmask=cmask, mode=mode:
            (block(bx, cmask, mode=mode, context=ctx if mode == "decode" else None) * bw).sum(), params)
    est = EstimatorModel(EstimatorConfig(3, hidden=2, head_hidden=3), seed=1).astype(np.float64)
    seqs = [rng.standard_normal((3, 3))]
    cases["estimator_sentence_head"] = (lambda: sentence_scores(est, seqs, seqs).sum(),
                                        est.gru.parameters() + est.sentence_hidden.parameters()
                                        + est.sentence_out.parameters())
    return cases


@criterion(1, "gradient suite: max rel err < 1e-5 in double precision, runtime < 2 min")
def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    errors = {name: grad_check(f, params) for name, (f, params) in gradient_cases(np.random.default_rng(0)).items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    print(f"\n[criterion 1] {len(errors)} cases, worst {worst} = {errors[worst]:.2e}, {elapsed:.1f}s")
    assert errors[worst] < 1e-5
    assert elapsed < 120


# -- 2 --------------------------------------------------------------------------

@criterion(2, "zero-attention identity: encode mode bit-equal to skip branch; cross-attention grads exactly 0")
def test_criterion_02_zero_attention_identity():
    rng = np.random.default_rng(1)
    for trial in range(20):
        d, heads = [(8, 2), (16, 4), (12, 3)][trial % 3]
        block = UnifiedBlock(d, heads, 2 * d, rng)
        n = int(rng.integers(1, 7))
        x = Tensor(rng.standard_normal((2, n, d)).astype(np.float32))
        mask = np.zeros((2, 1, n), dtype=bool)
        mask[1, 0, max(1, n - 2):] = True
        assert np.array_equal(block(x, mask, mode="encode").data, skip_branch_block(block, x, mask).data)
        block.zero_grad()
        (block(x, mask, mode="encode") ** 2).sum().backward()
        for param in block.cross_attn.parameters():
            assert param.grad is not None and not np.any(param.grad)


# -- 3 --------------------------------------------------------------------------

@criterion(3, "hard-EM exactness: mixture loss == min per-expert NLL on 1,000 samples, bit-exact")
def test_criterion_03_hard_em_exactness():
    vocab = C.Vocabulary([f"w{i}" for i in range(20)], experts=3)
    pred = DualNMTPredictor(NMTConfig(len(vocab), d_model=16, heads=2, layers=1, ff_dim=32, experts=3), vocab, 0)
    rng = np.random.default_rng(2)
    words = np.arange(vocab.n_special, len(vocab))
    with no_grad():
        for _ in range(1000):
            x = rng.choice(words, int(rng.integers(1, 8))).tolist()
            y = rng.choice(words, int(rng.integers(1, 8))).tolist()
            direction = PRIMAL if rng.random() < 0.5 else DUAL
            nlls = [float(pred.expert_nll(x, y, z, direction).data) for z in range(3)]
            assert float(pred.mixture_loss(x, y, direction).data) == min(nlls)
            r = responsibility(nlls)
            assert r.sum() == 1.0 and set(r.tolist()) <= {0.0, 1.0}
            assert int(np.argmax(r)) == nlls.index(min(nlls))
    assert responsibility([2.0, 1.0, 1.0]).tolist() == [0, 1, 0]  # ties: lowest index


# -- 4 --------------------------------------------------------------------------

@criterion(4, "feature width: K(2d+4) == 5140 for K=5, d=512; NMT and XLM streams width-equal")
def test_criterion_04_feature_width():
    assert feature_width(5, 512) == 5140
    for experts, d in itertools.product((1, 2, 3, 5), (4, 8, 12)):
        vocab = C.Vocabulary(list("abcdefgh"), experts=experts)
        pred = DualNMTPredictor(NMTConfig(len(vocab), d_model=d, heads=2, layers=1, ff_dim=8, experts=experts), vocab)
        xlm = XLMEncoder(XLMConfig(len(vocab), d_model=d, heads=2, layers=1, ff_dim=8), vocab)
        x, y = vocab.encode(list("abcd")), vocab.encode(list("hgf"))
        a = assemble_nmt_features(pred, x, y)
        b = assemble_xlm_features(xlm, (x, y), experts)
        assert a.width == b.width == feature_width(experts, d)
        assert a.values.shape[0] == b.values.shape[0] == len(y)


# -- 5 --------------------------------------------------------------------------

@criterion(5, "HTER oracle: worked example 0.4286, identity 0, 500 random pairs exact")
def test_criterion_05_hter_oracle():
    assert abs(C.compute_hter(MT, PE) - 0.4286) <= 1e-4
    assert C.compute_hter(PE, PE) == 0.0
    rng = np.random.default_rng(3)
    for _ in range(500):
        mt = rng.choice(list("abcde"), int(rng.integers(1, 12))).tolist()
        pe = rng.choice(list("abcde"), int(rng.integers(0, 12))).tolist()
        assert C.compute_hter(mt, pe) == min(1.0, brute_levenshtein(mt, pe) / len(mt))
        assert editdist.levenshtein(mt, pe) == brute_levenshtein(mt, pe)


# -- 6 --------------------------------------------------------------------------

@criterion(6, "metric oracles on 100 random inputs to 1e-10; affine and label-swap invariances")
def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(3, 50))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        assert abs(pearson(a, b) - oracle_pearson(a.tolist(), b.tolist())) < 1e-10
        assert abs(pearson(2 * a + 3, b) - pearson(a, b)) < 1e-12
        for got, want in zip(mae_rmse(a, b), oracle_mae_rmse(a.tolist(), b.tolist())):
            assert abs(got - want) < 1e-10
        g, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        assert abs(mcc(g, p) - oracle_mcc(g.tolist(), p.tolist())) < 1e-10
        f_bad, f_ok = f1_scores(g, p)
        assert abs(f_bad - oracle_f1(g.tolist(), p.tolist(), 1)) < 1e-10
        assert abs(f_ok - oracle_f1(g.tolist(), p.tolist(), 0)) < 1e-10
        assert f1_scores(1 - g, 1 - p) == (f_ok, f_bad)
        assert abs(abs(mcc(1 - g, 1 - p)) - abs(mcc(g, p))) < 1e-12
        hyps = [rng.integers(0, 3, int(rng.integers(4, 10))).tolist() for _ in range(4)]
        refs = [rng.integers(0, 3, int(rng.integers(4, 10))).tolist() for _ in range(4)]
        assert abs(corpus_bleu(hyps, refs) - oracle_bleu(hyps, refs)) < 1e-10


# -- 7, 8, 9: shared default-configuration run ------------------------------------------

@pytest.mark.slow
@criterion(7, "dual learning: >= 90% teacher-forced token accuracy in both directions within 15 CPU-min")
def test_criterion_07_dual_learning(trained_run):
    r = trained_run
    held = C.gen_parallel(P.derive_seed(r.cfg.seed, "acceptance-heldout"), 300, r.data.lexicon, r.cfg.styles,
                          r.cfg.min_len, r.cfg.max_len)
    src, tgt = P.encode_pairs(r.tokenizer, held)
    forward = teacher_forced_accuracy(r.predictor, src, tgt, PRIMAL)
    backward = teacher_forced_accuracy(r.predictor, tgt, src, DUAL)
    print(f"\n[criterion 7] primal {forward:.4f} dual {backward:.4f} nmt training {r.timings['nmt']:.0f}s")
    assert forward >= 0.9 and backward >= 0.9
    assert r.timings["nmt"] < 15 * 60


@pytest.mark.slow
@criterion(8, "expert specialization: matched per-expert accuracy >= 80%, distinct hypotheses >= 80%")
def test_criterion_08_expert_specialization(trained_run):
    r = trained_run
    held = C.gen_parallel(P.derive_seed(r.cfg.seed, "acceptance-experts"), 300, r.data.lexicon, r.cfg.styles,
                          r.cfg.min_len, r.cfg.max_len)
    rep = P.expert_specialization(r.predictor, r.tokenizer, r.data.lexicon, [p.source for p in held], r.cfg.styles)
    print(f"\n[criterion 8] matched {rep['matched_accuracy']} distinct {rep['distinct_fraction']:.3f}")
    assert min(rep["matched_accuracy"].values()) >= 0.8
    assert rep["distinct_fraction"] >= 0.8


@pytest.mark.slow
@criterion(9, "end-to-end QE: dev Pearson >= 0.6 and combined MCC >= 0.4 within 30 CPU-min")
def test_criterion_09_end_to_end(trained_run):
    m, t = trained_run.metrics, trained_run.timings["pipeline"]
    print(f"\n[criterion 9] pearson {m['pearson']:.4f} combined mcc {m['combined_mcc']:.4f} pipeline {t:.0f}s")
    assert len(trained_run.data.qe.train) + len(trained_run.data.qe.dev) + len(trained_run.data.qe.test) == 2000
    assert m["pearson"] >= 0.6
    assert m["combined_mcc"] >= 0.4
    assert t < 30 * 60


# -- 10 -------------------------------------------------------------------------

REDUCED = ["n_parallel=400", "n_qe=300", "nmt_steps=150", "xlm_steps=100", "d_model=32", "ff_dim=64",
           "est_epochs=3", "hidden=16", "head_hidden=16"]


@pytest.mark.slow
@criterion(10, "ablation harness: four rows in module-increment order, all train and evaluate")
def test_criterion_10_ablation(tmp_path):
    argv = ["ablate", "--out", str(tmp_path)] + [a for item in REDUCED for a in ("--set", item)]
    assert cli_main(argv) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [row["system"] for row in rows] == ["NMT-only", "+XLM", "+mixture&dual", "+f_dual"]
    assert [(row["experts"] > 1, row["xlm"], row["f_dual"]) for row in rows] == [
        (False, False, False), (False, True, False), (True, True, False), (True, True, True)]
    for row in rows:
        assert all(np.isfinite(row[k]) for k in ("pearson", "mae", "rmse", "mcc", "f1_bad", "f1_ok"))
    assert (tmp_path / "ablation.txt").read_text().count("\n") == 6


# -- 11 -------------------------------------------------------------------------

@pytest.mark.slow
@criterion(11, "corpus filtering: precision >= 0.7; filtered BLEU >= unfiltered in >= 2 of 3 seeds; < 30 CPU-min")
def test_criterion_11_filtering(trained_run):
    r = trained_run
    start = time.perf_counter()
    rep = P.filtering_experiment(r.cfg, r.system, r.data.lexicon)
    elapsed = time.perf_counter() - start
    runs = [(x["seed"], round(x["bleu_unfiltered"], 4), round(x["bleu_filtered"], 4)) for x in rep["runs"]]
    print(f"\n[criterion 11] precision {rep['filter']['precision']:.3f} runs {runs} {elapsed:.0f}s")
    assert r.cfg.corrupt_fraction == 0.2 and r.cfg.drop_fraction == 0.2 and len(rep["runs"]) == 3
    assert rep["filter"]["precision"] >= 0.7
    assert rep["filtered_wins"] >= 2
    assert elapsed < 30 * 60


# -- 12 -------------------------------------------------------------------------

TINY = ["n_parallel=120", "n_qe=80", "lexicon_words=10", "bpe_merges=20", "max_len=6", "d_model=16", "heads=2",
        "layers=1", "ff_dim=32", "nmt_steps=30", "nmt_batch=8", "warmup=2", "xlm_layers=1", "xlm_steps=15",
        "xlm_batch=8", "hidden=8", "head_hidden=8", "est_epochs=2", "est_batch=16"]


@criterion(12, "reproducibility: byte-identical metrics JSON across runs; bit-exact checkpoint round trip")
def test_criterion_12_reproducibility(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["evaluate", "--split", "dev", "--out", str(out)] + [a for item in TINY for a in ("--set", item)]
        assert cli_main(argv) == 0
        outputs.append((out / "metrics.dev.json").read_bytes())
    assert outputs[0] == outputs[1]

    tok = C.Tokenizer.load(tmp_path / "a" / "bpe" / "tokenizer.json")
    pred = P.load_nmt(tmp_path / "a" / "nmt", tok)
    P.save_nmt(tmp_path / "copy", pred)
    back = P.load_nmt(tmp_path / "copy", tok)
    for name, value in pred.state_dict().items():
        assert np.array_equal(value, back.state_dict()[name])
    assert (tmp_path / "copy" / "weights.bin").read_bytes() == (tmp_path / "a" / "nmt" / "weights.bin").read_bytes()
    est = P.load_estimator(tmp_path / "a" / "estimator" / "sentence", "sentence", tok.vocab.hash())
    P.save_estimator(tmp_path / "est", est, "sentence", tok.vocab.hash())
    assert (tmp_path / "est" / "weights.bin").read_bytes() == \
        (tmp_path / "a" / "estimator" / "sentence" / "weights.bin").read_bytes()
