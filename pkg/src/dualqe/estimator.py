"""QE estimator: one Bi-GRU shared by the NMT and XLM feature streams.

Sentence HTER comes from top-k pooled GRU states of both streams, concatenated
and passed through two affine layers.  Word and gap tags come from per-position
GRU states through a two-class head per stream; the stream probabilities are
then blended (0.8 NMT / 0.2 XLM by default).

Each task trains its own ``EstimatorModel`` instance (GRU + that task's head).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import mcc, pearson
from .features import gap_features, pool_words
from .nn import tensor as T
from .nn.layers import BiGRU, Linear, Module
from .nn.optim import Adam
from .nn.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TASKS = ("sentence", "word", "gap")
POOL_MODES = ("mean", "max")


@dataclass
class EstimatorConfig:
    input_dim: int
    hidden: int = 32
    head_hidden: int = 32
    pool_mode: str = "mean"
    top_k: int = 3
    w_nmt: float = 0.8
    w_xlm: float = 0.2

    def __post_init__(self):
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        _check_weights(self.w_nmt, self.w_xlm)


def _check_weights(w_nmt, w_xlm):
    if abs(w_nmt + w_xlm - 1.0) > 1e-9 or min(w_nmt, w_xlm) < 0:
        raise ValueError(f"blend weights must be non-negative and sum to 1, got ({w_nmt}, {w_xlm})")


class EstimatorModel(Module):
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, hh = config.hidden, config.head_hidden
        self.gru = BiGRU(config.input_dim, h, rng)
        self.sentence_hidden = Linear(4 * h, hh, rng)
        self.sentence_out = Linear(hh, 1, rng)
        self.word_hidden = Linear(2 * h, hh, rng)
        self.word_out = Linear(hh, 2, rng)
        self.gap_hidden = Linear(2 * h, hh, rng)
        self.gap_out = Linear(hh, 2, rng)
        # per-stream input standardisation, fitted on training features
        self.shift = {"nmt": np.zeros(config.input_dim, np.float32), "xlm": np.zeros(config.input_dim, np.float32)}
        self.scale = {"nmt": np.ones(config.input_dim, np.float32), "xlm": np.ones(config.input_dim, np.float32)}
        self.name_parameters()

    def hyperparameters(self):
        return asdict(self.config)

    def head(self, task):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        return getattr(self, f"{task}_hidden"), getattr(self, f"{task}_out")

    def task_parameters(self, task):
        hidden, out = self.head(task)
        return self.gru.parameters() + hidden.parameters() + out.parameters()

    def normalize(self, stream, values):
        return ((values - self.shift[stream]) / self.scale[stream]).astype(np.float32)

    def fit_normalizer(self, rows_by_stream):
        for stream, rows in rows_by_stream.items():
            if rows is None or len(rows) == 0:
                continue
            stacked = np.concatenate(rows, axis=0).astype(np.float64)
            self.shift[stream] = stacked.mean(axis=0).astype(np.float32)
            self.scale[stream] = np.maximum(stacked.std(axis=0), 1e-3).astype(np.float32)

    def extra_arrays(self):
        return {f"norm.{s}.{kind}": getattr(self, kind)[s] for s in ("nmt", "xlm") for kind in ("shift", "scale")}

    def load_extra_arrays(self, arrays):
        for s in ("nmt", "xlm"):
            for kind in ("shift", "scale"):
                getattr(self, kind)[s] = np.asarray(arrays[f"norm.{s}.{kind}"], dtype=np.float32)


def topk_pool(states, k=3, mode="mean", mask=None):
    """Per channel, keep the ``k`` largest values over time, then reduce.

    ``mode="max"`` is plain global max pooling (the top-k step cannot change
    a maximum).  ``mask`` (batch, n) marks real positions; rows shorter than
    ``k`` average all of their positions.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"mode must be one of {POOL_MODES}")
    if k < 1:
        raise ValueError("k must be >= 1")
    states = states if isinstance(states, Tensor) else Tensor(np.asarray(states))
    squeeze = states.ndim == 2
    if squeeze:
        states = states.reshape(1, *states.shape)
    b, n, f = states.shape
    if n == 0:
        raise ValueError("cannot pool an empty sequence")
    mask = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("cannot pool an empty sequence")
    k_eff = 1 if mode == "max" else min(k, n)
    key = np.where(mask[:, :, None], states.data, -np.inf)
    order = np.argsort(-key, axis=1, kind="stable")[:, :k_eff]
    picked = T.take_along_axis(states, order, axis=1)
    taken = np.minimum(lengths, k_eff)
    weights = (np.arange(k_eff)[None, :] < taken[:, None]) / taken[:, None]
    pooled = (picked * weights[:, :, None].astype(states.dtype)).sum(axis=1)
    return pooled.reshape(f) if squeeze else pooled


def combine_streams(p_nmt, p_xlm, w_nmt=0.8, w_xlm=0.2):
    _check_weights(w_nmt, w_xlm)
    p_nmt = np.asarray(p_nmt, dtype=np.float64)
    p_xlm = np.asarray(p_xlm, dtype=np.float64)
    if p_nmt.shape != p_xlm.shape:
        raise ValueError(f"stream shapes differ: {p_nmt.shape} vs {p_xlm.shape}")
    if w_xlm == 0.0:
        return p_nmt.copy()
    return w_nmt * p_nmt + w_xlm * p_xlm


def _pad(seqs, dtype):
    longest = max(len(s) for s in seqs)
    width = seqs[0].shape[1]
    out = np.zeros((len(seqs), longest, width), dtype=dtype)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def _run_stream(model, stream, seqs):
    dtype = model.gru.forward_dir.w_ih.dtype
    for s in seqs:
        if s.shape[1] != model.config.input_dim:
            raise ValueError(f"{stream} features have width {s.shape[1]}, estimator expects {model.config.input_dim}")
        if len(s) == 0:
            raise ValueError("empty feature sequence")
    x, mask = _pad([model.normalize(stream, s) for s in seqs], dtype)
    return model.gru(Tensor(x), mask), mask


def _check_streams(nmt, xlm):
    if xlm is not None:
        if len(nmt) != len(xlm):
            raise ValueError("stream batch sizes differ")
        for a, b in zip(nmt, xlm):
            if a.shape != b.shape:
                raise ValueError(f"stream feature shapes differ: {a.shape} vs {b.shape}")


def sentence_scores(model, nmt_seqs, xlm_seqs=None):
    """Raw (unclamped) HTER regressions for a batch, as a Tensor.

    Without an XLM stream its pooled half of the head input is zero.
    """
    _check_streams(nmt_seqs, xlm_seqs)
    cfg = model.config
    h_nmt, mask = _run_stream(model, "nmt", nmt_seqs)
    pooled = [topk_pool(h_nmt, cfg.top_k, cfg.pool_mode, mask)]
    if xlm_seqs is not None:
        h_xlm, _ = _run_stream(model, "xlm", xlm_seqs)
        pooled.append(topk_pool(h_xlm, cfg.top_k, cfg.pool_mode, mask))
    else:
        pooled.append(Tensor(np.zeros(pooled[0].shape, dtype=pooled[0].dtype)))
    hidden = T.tanh(model.sentence_hidden(T.concat(pooled, axis=-1)))
    out = model.sentence_out(hidden)
    return out.reshape(out.shape[0])


def sentence_forward(model, nmt_features, xlm_features=None):
    """Clamped HTER estimate for one sentence."""
    with no_grad():
        raw = sentence_scores(model, [np.asarray(nmt_features)],
                              None if xlm_features is None else [np.asarray(xlm_features)])
    return float(np.clip(raw.data[0], 0.0, 1.0))


def _tag_logits(model, task, stream, seqs):
    hidden, out = model.head(task)
    h, mask = _run_stream(model, stream, seqs)
    return out(T.tanh(hidden(h))), mask


def tag_logits(model, task, nmt_seqs, xlm_seqs=None):
    """Per-position 2-class logits for each stream: ``{stream: Tensor}``, plus the mask."""
    _check_streams(nmt_seqs, xlm_seqs)
    logits, mask = {}, None
    logits["nmt"], mask = _tag_logits(model, task, "nmt", nmt_seqs)
    if xlm_seqs is not None:
        logits["xlm"], _ = _tag_logits(model, task, "xlm", xlm_seqs)
    return logits, mask


def _softmax_np(x):
    x = x.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _blend_tag_probs(model, task, nmt_seqs, xlm_seqs):
    cfg = model.config
    with no_grad():
        logits, mask = tag_logits(model, task, nmt_seqs, xlm_seqs)
    probs = {s: _softmax_np(lg.data) for s, lg in logits.items()}
    if "xlm" in probs:
        blended = combine_streams(probs["nmt"], probs["xlm"], cfg.w_nmt, cfg.w_xlm)
    else:
        blended = probs["nmt"]
    lengths = mask.sum(axis=1)
    per_stream = {s: [p[i, :n] for i, n in enumerate(lengths)] for s, p in probs.items()}
    return per_stream, [blended[i, :n] for i, n in enumerate(lengths)]


def word_forward(model, features, word_alignment, xlm_features=None, n_words=None):
    """Word-level (p_OK, p_BAD) rows per stream and blended, for one sentence."""
    nmt = pool_words(np.asarray(features), word_alignment, n_words)
    xlm = None if xlm_features is None else [pool_words(np.asarray(xlm_features), word_alignment, n_words)]
    per_stream, blended = _blend_tag_probs(model, "word", [nmt], xlm)
    return {s: v[0] for s, v in per_stream.items()}, blended[0]


def gap_forward(model, gap_nmt, gap_xlm=None):
    """Blended (p_OK, p_BAD) rows for each of the ``|words| + 1`` gaps."""
    _, blended = _blend_tag_probs(model, "gap", [np.asarray(gap_nmt)],
                                  None if gap_xlm is None else [np.asarray(gap_xlm)])
    return blended[0]


# -- datasets ----------------------------------------------------------------

@dataclass
class EstimatorExample:
    """Token features of one QE sample plus its labels (BAD == 1)."""

    nmt: np.ndarray
    xlm: np.ndarray | None
    word_index: np.ndarray
    hter: float = 0.0
    word_tags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gap_tags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_words(self):
        return int(np.max(self.word_index)) + 1


def task_inputs(example, task, use_xlm=True):
    """(nmt sequence, xlm sequence or None, target) for one example and task."""
    xlm = example.xlm if use_xlm else None
    if task == "sentence":
        return example.nmt, xlm, float(example.hter)
    n = len(example.word_tags) if len(example.word_tags) else example.n_words
    nmt_w = pool_words(example.nmt, example.word_index, n)
    xlm_w = None if xlm is None else pool_words(xlm, example.word_index, n)
    if task == "word":
        return nmt_w, xlm_w, np.asarray(example.word_tags, dtype=np.int64)
    if task == "gap":
        return (gap_features(nmt_w), None if xlm_w is None else gap_features(xlm_w),
                np.asarray(example.gap_tags, dtype=np.int64))
    raise ValueError(f"unknown task {task!r}")


def _prepare(examples, task, use_xlm):
    return [task_inputs(e, task, use_xlm) for e in examples]


def _batch_loss(model, task, batch, bad_weight):
    nmt = [b[0] for b in batch]
    xlm = None if batch[0][1] is None else [b[1] for b in batch]
    if task == "sentence":
        raw = sentence_scores(model, nmt, xlm)
        target = np.array([b[2] for b in batch], dtype=raw.dtype)
        diff = raw - target
        return (diff * diff).mean()
    logits, mask = tag_logits(model, task, nmt, xlm)
    labels = np.zeros(mask.shape, dtype=np.int64)
    for i, b in enumerate(batch):
        labels[i, : len(b[2])] = b[2]
    weights = np.where(labels == 1, bad_weight, 1.0) * mask
    weights = (weights / weights.sum()).astype(logits["nmt"].dtype)
    cfg = model.config
    blend = {"nmt": cfg.w_nmt, "xlm": cfg.w_xlm} if "xlm" in logits else {"nmt": 1.0}
    total = None
    bi, ni = np.nonzero(np.ones(mask.shape, dtype=bool))
    for stream, lg in logits.items():
        if blend[stream] == 0.0:
            continue
        logp = T.log_softmax(lg, axis=-1)
        picked = logp[bi, ni, labels.reshape(-1)].reshape(*mask.shape)
        term = -(picked * weights).sum() * blend[stream]
        total = term if total is None else total + term
    return total


def predict_task(model, task, inputs, batch_size=64):
    """Clamped HTER values (sentence) or per-sentence blended BAD probabilities (word, gap)."""
    out = []
    for start in range(0, len(inputs), batch_size):
        part = inputs[start:start + batch_size]
        nmt = [b[0] for b in part]
        xlm = None if part[0][1] is None else [b[1] for b in part]
        if task == "sentence":
            with no_grad():
                raw = sentence_scores(model, nmt, xlm)
            out.extend(np.clip(raw.data.astype(np.float64), 0.0, 1.0).tolist())
        else:
            _, blended = _blend_tag_probs(model, task, nmt, xlm)
            out.extend(p[:, 1] for p in blended)
    return out


def predict_examples(model, task, examples, use_xlm=True):
    return predict_task(model, task, _prepare(examples, task, use_xlm))


def dev_score(task, predictions, inputs, threshold=0.5):
    """Model-selection score: Pearson for sentences, MCC over tags otherwise."""
    if task == "sentence":
        gold = np.array([b[2] for b in inputs])
        try:
            return pearson(np.asarray(predictions), gold)
        except ValueError:
            return float("-inf")
    gold = np.concatenate([b[2] for b in inputs])
    pred = np.concatenate([(p >= threshold).astype(np.int64) for p in predictions])
    return mcc(gold, pred)


@dataclass
class TrainingReport:
    task: str
    losses: list = field(default_factory=list)
    dev_scores: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("nan")


def train_estimator(model, examples, task, epochs=20, lr=1e-3, batch_size=32, seed=0,
                    dev_examples=None, bad_weight=1.0, use_xlm=True, clip_norm=1.0, fit_normalizer=True):
    """Train ``model``'s GRU and ``task`` head; keeps the best dev epoch's weights.

    Sentence loss is squared error on the raw output; word and gap losses are
    class-weighted cross-entropy per stream, weighted by the blend weights.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    if fit_normalizer:
        model.fit_normalizer({"nmt": [e.nmt for e in examples],
                              "xlm": [e.xlm for e in examples] if use_xlm and examples[0].xlm is not None else None})
    train = _prepare(examples, task, use_xlm)
    dev = _prepare(dev_examples, task, use_xlm) if dev_examples else None
    rng = np.random.default_rng(seed)
    params = model.task_parameters(task)
    opt = Adam(params, lr=lr, clip_norm=clip_norm)
    report = TrainingReport(task)
    best_state = None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start:start + batch_size]]
            loss = _batch_loss(model, task, batch, bad_weight)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(batch)
        report.losses.append(total / len(train))
        if dev is not None:
            score = dev_score(task, predict_task(model, task, dev), dev)
            report.dev_scores.append(score)
            log.info("estimator %s epoch %d loss %.4f dev %.4f", task, epoch, report.losses[-1], score)
            if best_state is None or score > report.best_score:
                report.best_epoch, report.best_score = epoch, score
                best_state = copy.deepcopy(model.state_dict())
        else:
            log.info("estimator %s epoch %d loss %.4f", task, epoch, report.losses[-1])
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        report.best_epoch = epochs
    return report


@dataclass
class QEPrediction:
    hter_hat: float
    word_probs: np.ndarray
    gap_probs: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        if len(self.gap_probs) != len(self.word_probs) + 1:
            raise ValueError("gap probabilities must number one more than word probabilities")
        self.hter_hat = float(np.clip(self.hter_hat, 0.0, 1.0))

    @property
    def word_tags(self):
        return (np.asarray(self.word_probs) >= self.threshold).astype(np.int64)

    @property
    def gap_tags(self):
        return (np.asarray(self.gap_probs) >= self.threshold).astype(np.int64)


# -- stacking ----------------------------------------------------------------

def ridge_fit(X, y, lam=1e-6):
    """Ridge regression with an unpenalised intercept (fit on centred data)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    w = np.linalg.solve(Xc.T @ Xc + lam * np.eye(X.shape[1]), Xc.T @ (y - y_mean))
    return w, float(y_mean - x_mean @ w)


def fold_indices(n, folds, seed=0):
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"{n} samples cannot be split into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def out_of_fold_predictions(fit_predict, n, folds=5, seed=0):
    """``fit_predict(train_idx, held_idx)`` must return predictions for ``held_idx``."""
    out = np.zeros(n)
    for held in fold_indices(n, folds, seed):
        train = np.setdiff1d(np.arange(n), held)
        out[held] = np.asarray(fit_predict(train, held), dtype=np.float64)
    return out


@dataclass
class StackResult:
    weights: np.ndarray
    intercept: float
    cv_predictions: np.ndarray

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        return X @ self.weights + self.intercept


def stack_ensemble(predictions, labels, folds=5, lam=1e-6, seed=0):
    """Second-stage ridge over per-system out-of-fold predictions (one column each).

    ``cv_predictions`` are the stacker's own cross-validated outputs; the
    returned weights come from a fit on all rows.
    """
    X = np.asarray(predictions, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[1] < 1:
        raise ValueError("need at least one prediction column")
    if len(X) != len(y):
        raise ValueError("predictions and labels differ in length")

    def fit_predict(train, held):
        w, b = ridge_fit(X[train], y[train], lam)
        return X[held] @ w + b

    cv = out_of_fold_predictions(fit_predict, len(y), folds, seed)
    w, b = ridge_fit(X, y, lam)
    return StackResult(w, b, cv)
