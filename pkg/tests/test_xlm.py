import numpy as np
import pytest

from dualqe import corpus as C
from dualqe.nn.tensor import no_grad
from dualqe.nn.optim import Adam
from dualqe.xlm import (
    SRC_LANG,
    TGT_LANG,
    XLMConfig,
    XLMEncoder,
    XLMSchedule,
    batch_target_states_and_distributions,
    masked_accuracy,
    masked_loss,
    mlm_mask,
    pretrain_step,
    pretrain_xlm,
    target_states_and_distributions,
    tlm_batch,
    tlm_layout,
)


@pytest.fixture(scope="module")
def small():
    lex = C.make_lexicon(0, n_words=8)
    pairs = C.gen_parallel(0, 60, lex, 1, min_len=3, max_len=6)
    tok = C.build_tokenizer([p.source for p in pairs] + [p.target for p in pairs], 20, experts=1)
    src = [tok.encode(p.source)[0] for p in pairs]
    tgt = [tok.encode(p.target)[0] for p in pairs]
    return tok, src, tgt


def make_xlm(tok, seed=0, d=16):
    return XLMEncoder(XLMConfig(len(tok.vocab), d_model=d, heads=2, layers=2, ff_dim=32), tok.vocab, seed)


# -- masking ------------------------------------------------------------------

def test_zero_rate_selects_nothing():
    seq = [10, 11, 12, 13]
    mb = mlm_mask(seq, 0.0, 0, 50, 6)
    assert mb.input_ids == seq and mb.pred_positions == [] and mb.labels == []


def test_full_rate_forced_mask():
    seq = [10, 11, 12, 13]
    mb = mlm_mask(seq, 1.0, 0, 50, 6, mask_id=3, replace_probs=(1.0, 0.0, 0.0))
    assert mb.input_ids == [3] * 4
    assert mb.pred_positions == [0, 1, 2, 3] and mb.labels == seq
    assert len(mb.lang_ids) == len(mb.input_ids)


def test_selection_rate_concentration():
    mb = mlm_mask([20] * 10_000, 0.15, 7, 50, 6)
    assert 0.13 <= len(mb.pred_positions) / 10_000 <= 0.17
    kinds = np.array([mb.input_ids[p] for p in mb.pred_positions])
    # 80/10/10 split among the selected positions
    assert 0.75 <= np.mean(kinds == 3) <= 0.85


def test_rate_out_of_range_rejected():
    with pytest.raises(ValueError):
        mlm_mask([1, 2], 1.5, 0, 10, 6)


def test_tlm_layout_contract(small):
    tok, src, tgt = small
    ids, langs, positions = tlm_layout(src[0], tgt[0], tok.vocab.eos_id)
    assert len(ids) == len(src[0]) + len(tgt[0]) + 2
    switches = [i for i in range(1, len(langs)) if langs[i] != langs[i - 1]]
    assert switches == [len(src[0]) + 1]
    assert ids[len(src[0])] == tok.vocab.eos_id
    assert langs[0] == SRC_LANG and langs[-1] == TGT_LANG
    assert positions[len(src[0]) + 1] == 0
    mb = tlm_batch((src[0], tgt[0]), 0.5, 3, tok.vocab)
    assert len(mb.lang_ids) == len(mb.input_ids) == len(ids)
    assert [ids[p] for p in mb.pred_positions] == mb.labels


def test_masked_target_attends_to_source(small):
    tok, src, tgt = small
    model = make_xlm(tok)
    ids, langs, pos = tlm_layout(src[0], tgt[0], tok.vocab.eos_id)
    p = len(src[0]) + 1
    masked = list(ids)
    masked[p] = tok.vocab.mask_id
    zeroed = list(masked)
    for i in range(len(src[0])):
        zeroed[i] = tok.vocab.pad_id
    pad = np.zeros((1, len(ids)), dtype=bool)
    with no_grad():
        _, a = model.forward(np.array([masked]), np.array([pos]), np.array([langs]), pad)
        _, b = model.forward(np.array([zeroed]), np.array([pos]), np.array([langs]), pad)
    assert np.abs(a.data[0, p] - b.data[0, p]).max() > 1e-4


# -- pretraining ---------------------------------------------------------------

def test_fresh_loss_near_log_vocab(small):
    tok, src, tgt = small
    model = make_xlm(tok)
    rng = np.random.default_rng(0)
    batches = [tlm_batch((s, t), 0.3, rng, tok.vocab) for s, t in zip(src, tgt)]
    loss = masked_loss(model, batches)
    assert abs(loss - np.log(len(tok.vocab))) < 0.2 * np.log(len(tok.vocab))


def test_pretrain_step_skips_empty_batch(small):
    tok, src, _ = small
    model = make_xlm(tok)
    opt = Adam(model.parameters(), lr=1e-3)
    assert pretrain_step(model, [mlm_mask(src[0], 0.0, 0, len(tok.vocab), tok.vocab.n_special)], opt) is None


def test_pretraining_deterministic(small):
    tok, src, tgt = small
    sched = XLMSchedule(steps=15, batch_size=8, warmup=2)
    a = pretrain_xlm(make_xlm(tok, seed=1), src, tgt, sched, seed=5)
    b = pretrain_xlm(make_xlm(tok, seed=1), src, tgt, sched, seed=5)
    assert a == b and len(a) > 0


def test_target_states_and_distributions(small):
    tok, src, tgt = small
    model = make_xlm(tok)
    states, dists = target_states_and_distributions(model, src[0], tgt[0])
    assert states.shape == (len(tgt[0]), 16)
    assert dists.shape == (len(tgt[0]), len(tok.vocab))
    np.testing.assert_allclose(dists.sum(axis=1), 1.0, atol=1e-9)
    batched = batch_target_states_and_distributions(model, src[:3], tgt[:3], chunk=2)
    np.testing.assert_allclose(batched[0][1], dists, atol=1e-6)
    np.testing.assert_allclose(batched[0][0], states, atol=1e-5)


@pytest.mark.slow
def test_pretrained_xlm_predicts_masked_tokens():
    # single-style corpus: every masked target is determined by the source
    lex = C.make_lexicon(0)
    pairs = C.gen_parallel(0, 2000, lex, 1)
    tok = C.build_tokenizer([p.source for p in pairs] + [p.target for p in pairs], 200, experts=1)
    src = [tok.encode(p.source)[0] for p in pairs]
    tgt = [tok.encode(p.target)[0] for p in pairs]
    model = XLMEncoder(XLMConfig(len(tok.vocab)), tok.vocab, seed=0)
    pretrain_xlm(model, src[:1800], tgt[:1800], XLMSchedule(steps=2000), seed=0)
    rng = np.random.default_rng(99)
    held = [tlm_batch((s, t), 0.15, rng, tok.vocab) for s, t in zip(src[1800:], tgt[1800:])]
    assert masked_accuracy(model, held) >= 0.6
    hits = total = 0
    for s, t in zip(src[1800:1900], tgt[1800:1900]):
        _, d = target_states_and_distributions(model, s, t)
        hits += int(np.sum(np.argmax(d, axis=1) == np.array(t)))
        total += len(t)
    assert hits / total >= 0.8
