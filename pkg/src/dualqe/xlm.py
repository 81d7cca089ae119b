"""Toy cross-lingual masked language model (MLM + TLM pretraining)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .nmt import ConditionalEncoder, pad_batch
from .nn import tensor as T
from .nn.layers import Module, Parameter, sinusoidal_positions
from .nn.optim import Adam, linear_schedule
from .nn.tensor import no_grad

log = logging.getLogger(__name__)

SRC_LANG, TGT_LANG = 0, 1


@dataclass
class XLMConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 128
    max_positions: int = 256


@dataclass
class MaskedBatch:
    input_ids: list
    pred_positions: list
    labels: list
    lang_ids: list
    position_ids: list


class XLMEncoder(Module):
    """Transformer encoder with token, position and language embeddings.

    Blocks are the predictor's unified blocks, always run in encode mode.
    The MLM head reuses the token embedding table.
    """

    def __init__(self, config, vocab, seed=0):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.token_embedding = Parameter((rng.standard_normal((config.vocab_size, d)) / np.sqrt(d)).astype(T.DEFAULT_DTYPE))
        self.lang_embedding = Parameter((rng.standard_normal((2, d)) * 0.1).astype(T.DEFAULT_DTYPE))
        self.encoder = ConditionalEncoder(config.layers, d, config.heads, config.ff_dim, rng)
        self.positions = sinusoidal_positions(config.max_positions, d)
        self.name_parameters()

    def hyperparameters(self):
        return asdict(self.config)

    def forward(self, ids, position_ids, lang_ids, pad_mask):
        x = T.embedding(self.token_embedding, ids) * float(np.sqrt(self.config.d_model))
        x = x + self.positions[position_ids].astype(x.dtype) + T.embedding(self.lang_embedding, lang_ids)
        h = self.encoder(x, pad_mask[:, None, :], mode="encode")
        logits = T.matmul(h, T.transpose(self.token_embedding, (1, 0)))
        return h, logits


def mlm_mask(seq, select_rate, seed, vocab_size, n_special, mask_id=3, lang=SRC_LANG,
             replace_probs=(0.8, 0.1, 0.1), positions=None):
    """Select tokens for prediction and corrupt them (MASK / random / unchanged)."""
    if not 0.0 <= select_rate <= 1.0:
        raise ValueError("select_rate must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    seq = list(seq)
    chosen = np.flatnonzero(rng.random(len(seq)) < select_rate)
    ids = list(seq)
    p_mask, p_rand, _ = replace_probs
    for i in chosen:
        u = rng.random()
        if u < p_mask:
            ids[i] = mask_id
        elif u < p_mask + p_rand:
            ids[i] = int(rng.integers(n_special, vocab_size))
    return MaskedBatch(
        input_ids=ids,
        pred_positions=[int(i) for i in chosen],
        labels=[seq[i] for i in chosen],
        lang_ids=[lang] * len(seq),
        position_ids=list(positions) if positions is not None else list(range(len(seq))),
    )


def tlm_layout(src, tgt, eos_id):
    ids = list(src) + [eos_id] + list(tgt) + [eos_id]
    langs = [SRC_LANG] * (len(src) + 1) + [TGT_LANG] * (len(tgt) + 1)
    positions = list(range(len(src) + 1)) + list(range(len(tgt) + 1))
    return ids, langs, positions


def tlm_batch(pair, select_rate, seed, vocab, replace_probs=(0.8, 0.1, 0.1)):
    """Mask a concatenated ``[src, EOS, tgt, EOS]`` pair across both spans."""
    src, tgt = pair
    ids, langs, positions = tlm_layout(src, tgt, vocab.eos_id)
    mb = mlm_mask(ids, select_rate, seed, len(vocab), vocab.n_special, vocab.mask_id,
                  replace_probs=replace_probs, positions=positions)
    mb.lang_ids = langs
    return mb


def _collate(batches):
    ids, pad = pad_batch([b.input_ids for b in batches])
    pos, _ = pad_batch([b.position_ids for b in batches])
    langs, _ = pad_batch([b.lang_ids for b in batches])
    rows = np.array([i for i, b in enumerate(batches) for _ in b.pred_positions], dtype=np.int64)
    cols = np.array([p for b in batches for p in b.pred_positions], dtype=np.int64)
    labels = np.array([lab for b in batches for lab in b.labels], dtype=np.int64)
    return ids, pos, langs, pad, rows, cols, labels


def pretrain_step(model, batches, optimizer, lr=None):
    """Cross-entropy over prediction positions, then one optimizer step.

    Returns the mean loss, or None when the batch has nothing to predict.
    """
    ids, pos, langs, pad, rows, cols, labels = _collate(batches)
    if labels.size == 0:
        log.info("skipping xlm batch without prediction positions")
        return None
    _, logits = model.forward(ids, pos, langs, pad)
    logp = T.log_softmax(logits[rows, cols], axis=-1)
    loss = -logp[np.arange(labels.size), labels].sum() * (1.0 / labels.size)
    loss.backward()
    optimizer.step(lr)
    return float(loss.data)


def masked_accuracy(model, batches):
    ids, pos, langs, pad, rows, cols, labels = _collate(batches)
    if labels.size == 0:
        return float("nan")
    with no_grad():
        _, logits = model.forward(ids, pos, langs, pad)
    return float(np.mean(np.argmax(logits.data[rows, cols], axis=-1) == labels))


def masked_loss(model, batches):
    ids, pos, langs, pad, rows, cols, labels = _collate(batches)
    with no_grad():
        _, logits = model.forward(ids, pos, langs, pad)
        logp = T.log_softmax(logits[rows, cols], axis=-1)
    return float(-logp.data[np.arange(labels.size), labels].mean())


@dataclass
class XLMSchedule:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    tlm_mix: float = 0.5
    select_rate: float = 0.15


def pretrain_xlm(model, src_ids, tgt_ids, schedule, seed=0, callback=None, every=250):
    """Alternate MLM batches (one language side) and TLM batches (whole pairs)."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2,
               clip_norm=schedule.clip_norm)
    vocab = model.vocab
    n = len(src_ids)
    history = []
    for step in range(1, schedule.steps + 1):
        idx = rng.integers(0, n, size=schedule.batch_size)
        if rng.random() < schedule.tlm_mix:
            batches = [tlm_batch((src_ids[i], tgt_ids[i]), schedule.select_rate, rng, vocab) for i in idx]
        else:
            batches = []
            for i in idx:
                lang = int(rng.integers(0, 2))
                seq = (src_ids[i] if lang == SRC_LANG else tgt_ids[i]) + [vocab.eos_id]
                batches.append(mlm_mask(seq, schedule.select_rate, rng, len(vocab), vocab.n_special,
                                        vocab.mask_id, lang=lang))
        lr = linear_schedule(schedule.lr, step, schedule.warmup, schedule.steps)
        loss = pretrain_step(model, batches, opt, lr)
        if loss is not None:
            history.append(loss)
        if step % every == 0 or step == schedule.steps:
            log.info("xlm step %d loss %.4f", step, history[-1] if history else float("nan"))
            if callback is not None:
                callback(step, model)
    return history


def target_states_and_distributions(model, src, tgt):
    """Hidden states and pseudo-likelihood distributions over target positions.

    States come from one unmasked pass over the TLM layout.  Row ``i`` of the
    distributions comes from a separate pass in which only target position
    ``i`` is replaced by MASK.
    """
    return batch_target_states_and_distributions(model, [src], [tgt])[0]


def batch_target_states_and_distributions(model, srcs, tgts, chunk=256):
    vocab = model.vocab
    layouts = [tlm_layout(s, t, vocab.eos_id) for s, t in zip(srcs, tgts)]
    with no_grad():
        ids, pad = pad_batch([l[0] for l in layouts])
        pos, _ = pad_batch([l[2] for l in layouts])
        langs, _ = pad_batch([l[1] for l in layouts])
        h, _ = model.forward(ids, pos, langs, pad)
        states = [h.data[i, len(s) + 1: len(s) + 1 + len(t)].copy() for i, (s, t) in enumerate(zip(srcs, tgts))]

        jobs = []  # (sentence, target index, flat position)
        for i, (s, t) in enumerate(zip(srcs, tgts)):
            jobs.extend((i, j, len(s) + 1 + j) for j in range(len(t)))
        dists = [np.zeros((len(t), len(vocab))) for t in tgts]
        for start in range(0, len(jobs), chunk):
            part = jobs[start:start + chunk]
            seqs = []
            for i, _, p in part:
                seq = list(layouts[i][0])
                seq[p] = vocab.mask_id
                seqs.append(seq)
            m_ids, m_pad = pad_batch(seqs)
            m_pos, _ = pad_batch([layouts[i][2] for i, _, _ in part])
            m_lang, _ = pad_batch([layouts[i][1] for i, _, _ in part])
            _, logits = model.forward(m_ids, m_pos, m_lang, m_pad)
            rows = np.arange(len(part))
            cols = np.array([p for _, _, p in part])
            lg = logits.data[rows, cols].astype(np.float64)
            lg -= lg.max(axis=-1, keepdims=True)
            pr = np.exp(lg)
            pr /= pr.sum(axis=-1, keepdims=True)
            for (i, j, _), row in zip(part, pr):
                dists[i][j] = row
    return list(zip(states, dists))
