"""Dual-learning NMT predictor built from unified conditional encoders.

One block type serves as both encoder and decoder layer.  In encode mode the
cross-attention branch receives zero queries and zero values, so with
bias-free projections it adds an exact zero before its layer norm.  Two
stacks of such blocks (``enc_a``/``enc_b``) swap roles between the
source->target ("primal") and target->source ("dual") directions, sharing
one token embedding table that also serves as the output projection.

Experts are distinguished only by their start-of-sentence token; training
uses hard EM, i.e. each sample's loss is its lowest expert NLL.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .nn import tensor as T
from .nn.layers import AttentionWeights, FeedForward, LayerNorm, Module, Parameter, multi_head_attention, sinusoidal_positions
from .nn.optim import Adam, linear_schedule
from .nn.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

PRIMAL, DUAL = "primal", "dual"
NEG_LOGIT = -1e9


@dataclass
class NMTConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 128
    experts: int = 3
    max_positions: int = 256


def pad_batch(seqs, pad_id=0):
    """Right-pad integer sequences; returns ``(ids, pad_mask)`` with True on padding."""
    longest = max(len(s) for s in seqs)
    ids = np.full((len(seqs), longest), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    lengths = np.array([len(s) for s in seqs])
    return ids, np.arange(longest)[None, :] >= lengths[:, None]


def causal_mask(n):
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class UnifiedBlock(Module):
    def __init__(self, d_model, heads, ff_dim, rng):
        self.self_attn = AttentionWeights(d_model, heads, rng)
        self.cross_attn = AttentionWeights(d_model, heads, rng)
        self.ff = FeedForward(d_model, ff_dim, rng)
        self.ln_self = LayerNorm(d_model)
        self.ln_cross = LayerNorm(d_model)
        self.ln_ff = LayerNorm(d_model)

    def __call__(self, e_prev, self_mask=None, mode="encode", context=None, cross_mask=None,
                 skip_zero_branch=False):
        e = self.ln_self(e_prev + multi_head_attention(e_prev, e_prev, e_prev, self.self_attn, self_mask))
        if mode == "decode":
            if context is None:
                raise ValueError("decode mode needs an encoder context")
            e = self.ln_cross(e + multi_head_attention(e, context, context, self.cross_attn, cross_mask))
        elif mode == "encode":
            if skip_zero_branch:
                e = self.ln_cross(e)
            else:
                zeros = Tensor(np.zeros(e.shape, dtype=e.dtype))
                e = self.ln_cross(e + multi_head_attention(zeros, e_prev, zeros, self.cross_attn, self_mask))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self.ln_ff(e + self.ff(e))


class ConditionalEncoder(Module):
    def __init__(self, n_layers, d_model, heads, ff_dim, rng):
        self.blocks = [UnifiedBlock(d_model, heads, ff_dim, rng) for _ in range(n_layers)]

    def __call__(self, x, self_mask=None, mode="encode", context=None, cross_mask=None,
                 skip_zero_branch=False):
        for block in self.blocks:
            x = block(x, self_mask, mode, context, cross_mask, skip_zero_branch)
        return x


class DualNMTPredictor(Module):
    def __init__(self, config, vocab, seed=0):
        if vocab.experts < config.experts:
            raise ValueError(f"vocabulary has {vocab.experts} start tokens, config needs {config.experts}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.embedding = Parameter((rng.standard_normal((config.vocab_size, d)) / np.sqrt(d)).astype(T.DEFAULT_DTYPE))
        self.enc_a = ConditionalEncoder(config.layers, d, config.heads, config.ff_dim, rng)
        self.enc_b = ConditionalEncoder(config.layers, d, config.heads, config.ff_dim, rng)
        self.positions = sinusoidal_positions(config.max_positions, d)
        # tokens that are never prediction targets get no output probability,
        # so their (tied) embedding rows receive gradient only as inputs
        blocked = [vocab.pad_id, vocab.mask_id, vocab.lang_src_id, vocab.lang_tgt_id, *vocab.sos_ids]
        self.output_bias = np.zeros(config.vocab_size, dtype=T.DEFAULT_DTYPE)
        self.output_bias[blocked] = NEG_LOGIT
        self.name_parameters()

    @property
    def output_size(self):
        """Number of tokens the decoder can emit."""
        return int(np.count_nonzero(self.output_bias == 0))

    @property
    def experts(self):
        return self.config.experts

    def hyperparameters(self):
        return asdict(self.config)

    def sides(self, direction):
        """(encoding stack, decoding stack) for a translation direction."""
        if direction == PRIMAL:
            return self.enc_a, self.enc_b
        if direction == DUAL:
            return self.enc_b, self.enc_a
        raise ValueError(f"unknown direction {direction!r}")

    # -- forward pieces -----------------------------------------------------
    def embed(self, ids):
        x = T.embedding(self.embedding, ids) * float(np.sqrt(self.config.d_model))
        return x + self.positions[: ids.shape[1]].astype(x.dtype)

    def encode_ids(self, enc, ids, pad_mask):
        return enc(self.embed(ids), pad_mask[:, None, :], mode="encode")

    def decode_ids(self, enc, context, context_pad, tgt_in, tgt_pad):
        n = tgt_in.shape[1]
        self_mask = causal_mask(n)[None] | tgt_pad[:, None, :]
        z = enc(self.embed(tgt_in), self_mask, mode="decode", context=context, cross_mask=context_pad[:, None, :])
        logits = T.matmul(z, T.transpose(self.embedding, (1, 0))) + self.output_bias.astype(z.dtype)
        return z, logits

    def encode(self, enc, seq):
        """Encode one token sequence with stack ``enc``; returns (len, d)."""
        if len(seq) == 0:
            raise ValueError("cannot encode an empty sequence")
        ids, pad = pad_batch([list(seq)])
        return self.encode_ids(enc, ids, pad)[0]

    def decode(self, enc, context, target_input):
        """Teacher-forced decode of one sequence; ``target_input`` starts with an SOS token."""
        if not target_input or target_input[0] not in self.vocab.sos_ids[: self.experts]:
            raise ValueError("decoder input must begin with an expert start token")
        ids, pad = pad_batch([list(target_input)])
        ctx = context.reshape(1, *context.shape)
        z, logits = self.decode_ids(enc, ctx, np.zeros((1, context.shape[0]), dtype=bool), ids, pad)
        return z[0], logits[0]

    # -- likelihoods --------------------------------------------------------
    def _nll_from_logits(self, logits, targets, pad):
        logp = T.log_softmax(logits, axis=-1)
        b, n = targets.shape
        picked = logp[np.arange(b)[:, None], np.arange(n)[None, :], targets]
        return -(picked * (~pad).astype(logits.dtype)).sum(axis=1)

    def batch_expert_nll(self, srcs, tgts, experts, direction=PRIMAL):
        """Summed token NLL of each ``tgts[i]`` given ``srcs[i]`` under expert ``experts[i]``."""
        enc, dec = self.sides(direction)
        src_ids, src_pad = pad_batch([list(s) + [self.vocab.eos_id] for s in srcs])
        context = self.encode_ids(enc, src_ids, src_pad)
        tgt_in, tgt_pad = pad_batch([[self.vocab.sos_id(z)] + list(t) for z, t in zip(experts, tgts)])
        tgt_out, _ = pad_batch([list(t) + [self.vocab.eos_id] for t in tgts])
        _, logits = self.decode_ids(dec, context, src_pad, tgt_in, tgt_pad)
        return self._nll_from_logits(logits, tgt_out, tgt_pad)

    def expert_nll(self, x, y, z, direction=PRIMAL):
        if not 0 <= z < self.experts:
            raise ValueError(f"expert {z} out of range")
        return self.batch_expert_nll([x], [y], [z], direction)[0]

    def mixture_loss(self, x, y, direction=PRIMAL):
        """min over experts of the expert NLL; only the winner is in the graph."""
        nlls = [self.expert_nll(x, y, z, direction) for z in range(self.experts)]
        winner = int(np.argmax(responsibility([float(n.data) for n in nlls])))
        return nlls[winner]

    def batch_mixture_loss(self, srcs, tgts, direction=PRIMAL):
        """Hard-EM loss for a batch: per-sample min over all experts.

        Returns ``(summed_loss, winners, n_tokens)``.  The context is encoded
        once and shared by all experts, so the encoder receives the winners'
        gradients only.
        """
        k = self.experts
        enc, dec = self.sides(direction)
        b = len(srcs)
        src_ids, src_pad = pad_batch([list(s) + [self.vocab.eos_id] for s in srcs])
        context = self.encode_ids(enc, src_ids, src_pad)
        if k > 1:
            rep = np.tile(np.arange(b), k)
            context = context[rep]
            src_pad = src_pad[rep]
        tgt_in, tgt_pad = pad_batch([[self.vocab.sos_id(z)] + list(t) for z in range(k) for t in tgts])
        tgt_out, _ = pad_batch([list(t) + [self.vocab.eos_id] for _ in range(k) for t in tgts])
        _, logits = self.decode_ids(dec, context, src_pad, tgt_in, tgt_pad)
        nll = self._nll_from_logits(logits, tgt_out, tgt_pad).reshape(k, b)
        winners = np.argmin(nll.data, axis=0)  # argmin keeps the lowest index on ties
        chosen = nll[winners, np.arange(b)]
        n_tokens = sum(len(t) + 1 for t in tgts)
        return chosen.sum(), winners, n_tokens

    # -- inference ----------------------------------------------------------
    def teacher_forced(self, srcs, tgts, expert, direction=PRIMAL):
        """States and float64 next-token distributions for every target token.

        Returns per-sample lists of ``(states (|y|, d), probs (|y|, V))``; the
        state at row ``i`` is the one that predicts ``y_i``.
        """
        enc, dec = self.sides(direction)
        with no_grad():
            src_ids, src_pad = pad_batch([list(s) + [self.vocab.eos_id] for s in srcs])
            context = self.encode_ids(enc, src_ids, src_pad)
            tgt_in, tgt_pad = pad_batch([[self.vocab.sos_id(expert)] + list(t) for t in tgts])
            z, logits = self.decode_ids(dec, context, src_pad, tgt_in, tgt_pad)
        out = []
        for i, t in enumerate(tgts):
            n = len(t)
            lg = logits.data[i, :n].astype(np.float64)
            lg = lg - lg.max(axis=-1, keepdims=True)
            p = np.exp(lg)
            p /= p.sum(axis=-1, keepdims=True)
            out.append((z.data[i, :n].copy(), p))
        return out

    def token_distributions(self, x, y, z, direction=PRIMAL):
        return self.teacher_forced([x], [y], z, direction)[0][1]

    def encode_states(self, seqs, direction=DUAL):
        """Source-free encodings of ``seqs`` by the encoding stack of ``direction``."""
        enc, _ = self.sides(direction)
        with no_grad():
            ids, pad = pad_batch([list(s) + [self.vocab.eos_id] for s in seqs])
            h = self.encode_ids(enc, ids, pad)
        return [h.data[i, : len(s)].copy() for i, s in enumerate(seqs)]

    def greedy_decode_batch(self, srcs, expert, max_len, direction=PRIMAL):
        """Argmax decoding for each source; returns ``(tokens, truncated)`` pairs."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        enc, dec = self.sides(direction)
        b = len(srcs)
        with no_grad():
            src_ids, src_pad = pad_batch([list(s) + [self.vocab.eos_id] for s in srcs])
            context = self.encode_ids(enc, src_ids, src_pad)
            seqs = np.full((b, 1), self.vocab.sos_id(expert), dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            for _ in range(max_len):
                _, logits = self.decode_ids(dec, context, src_pad, seqs, np.zeros(seqs.shape, dtype=bool))
                nxt = np.argmax(logits.data[:, -1], axis=-1)
                nxt = np.where(done, self.vocab.pad_id, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == self.vocab.eos_id
                if done.all():
                    break
        results = []
        for i in range(b):
            toks = []
            finished = False
            for t in seqs[i, 1:]:
                if t == self.vocab.eos_id:
                    finished = True
                    break
                toks.append(int(t))
            results.append((toks, not finished))
        return results

    def greedy_decode(self, x, z, max_len, direction=PRIMAL):
        return self.greedy_decode_batch([x], z, max_len, direction)[0]


def responsibility(nlls):
    """One-hot vector selecting the lowest NLL; ties go to the lowest expert index."""
    nlls = np.asarray(nlls, dtype=np.float64)
    if nlls.size == 0 or not np.all(np.isfinite(nlls)):
        raise ValueError("responsibility needs at least one finite NLL")
    r = np.zeros(nlls.size)
    r[int(np.argmin(nlls))] = 1.0
    return r


def dual_train_step(predictor, batch, optimizer, dual=True, lr=None):
    """One iteration of model-level dual training on ``(srcs, tgts)``.

    Primal: ``enc_a`` encodes the source, ``enc_b`` decodes the target; update.
    Dual: ``enc_b`` encodes the target, ``enc_a`` decodes the source; update.
    Returns the per-token hard-EM losses of both directions (dual is NaN when
    ``dual=False``).
    """
    srcs, tgts = batch
    loss, _, n_tok = predictor.batch_mixture_loss(srcs, tgts, PRIMAL)
    (loss * (1.0 / n_tok)).backward()
    optimizer.step(lr)
    primal = float(loss.data) / n_tok
    if not dual:
        return primal, float("nan")
    loss, _, n_tok = predictor.batch_mixture_loss(tgts, srcs, DUAL)
    (loss * (1.0 / n_tok)).backward()
    optimizer.step(lr)
    return primal, float(loss.data) / n_tok


@dataclass
class TrainSchedule:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999


def train_predictor(predictor, src_ids, tgt_ids, schedule, seed=0, dual=True, callback=None, every=100):
    """Run dual training over encoded pairs; returns the loss history.

    ``callback(step, predictor)`` is invoked every ``every`` steps and at the end.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(predictor.parameters(), lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2,
               clip_norm=schedule.clip_norm)
    n = len(src_ids)
    order = rng.permutation(n)
    cursor = 0
    history = []
    for step in range(1, schedule.steps + 1):
        if cursor + schedule.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + schedule.batch_size]
        cursor += schedule.batch_size
        lr = linear_schedule(schedule.lr, step, schedule.warmup, schedule.steps)
        losses = dual_train_step(predictor, ([src_ids[i] for i in idx], [tgt_ids[i] for i in idx]), opt, dual, lr)
        history.append(losses)
        if step % every == 0 or step == schedule.steps:
            log.info("nmt step %d primal %.4f dual %.4f", step, *losses)
            if callback is not None:
                callback(step, predictor)
    return history


def teacher_forced_accuracy(predictor, srcs, tgts, direction=PRIMAL, expert=None, batch_size=128):
    """Fraction of target tokens (EOS excluded) that are the argmax prediction.

    With ``expert=None`` each sentence is scored with its best expert.
    """
    experts = range(predictor.experts) if expert is None else [expert]
    correct = total = 0
    for start in range(0, len(srcs), batch_size):
        s = srcs[start:start + batch_size]
        t = tgts[start:start + batch_size]
        best = np.zeros(len(s), dtype=np.int64)
        for z in experts:
            res = predictor.teacher_forced(s, t, z, direction)
            hits = np.array([int(np.sum(np.argmax(p, axis=1) == np.asarray(y))) for (_, p), y in zip(res, t)])
            best = np.maximum(best, hits)
        correct += int(best.sum())
        total += sum(len(y) for y in t)
    return correct / total
