"""Per-token QE features from the NMT and XLM predictors.

Each target subword gets ``K`` expert slots laid out as
``[model-derived (d) | dual-model (d) | mismatch (4)]``, giving a row width
of ``K * (2d + 4)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nmt import DUAL, PRIMAL
from .xlm import batch_target_states_and_distributions

LOG_FLOOR = float(np.log(1e-12))


def feature_width(experts, d_model):
    return experts * (2 * d_model + 4)


def mismatch_features(dist, y_mt):
    """[log p(y_mt), log p(y_max), their difference, 1[y_mt == y_max]].

    Argmax ties resolve to the lowest token id; logs are floored at log(1e-12).
    """
    dist = np.asarray(dist, dtype=np.float64)
    y_max = int(np.argmax(dist))
    with np.errstate(divide="ignore"):
        lp_mt = max(float(np.log(dist[y_mt])), LOG_FLOOR)
        lp_max = max(float(np.log(dist[y_max])), LOG_FLOOR)
    return np.array([lp_mt, lp_max, lp_mt - lp_max, float(y_mt == y_max)])


def _mismatch_rows(probs, tokens):
    tokens = np.asarray(tokens)
    rows = np.arange(len(tokens))
    y_max = np.argmax(probs, axis=1)
    with np.errstate(divide="ignore"):
        lp_mt = np.maximum(np.log(probs[rows, tokens]), LOG_FLOOR)
        lp_max = np.maximum(np.log(probs[rows, y_max]), LOG_FLOOR)
    return np.stack([lp_mt, lp_max, lp_mt - lp_max, (tokens == y_max).astype(np.float64)], axis=1)


def model_feature(z, e):
    z = np.asarray(z)
    e = np.asarray(e)
    if z.shape != e.shape:
        raise ValueError(f"state/embedding shape mismatch: {z.shape} vs {e.shape}")
    return z * e


dual_feature = model_feature


@dataclass
class TokenFeatureMatrix:
    values: np.ndarray  # (n_tokens, experts * (2d + 4))
    word_index: np.ndarray  # parent word of each token
    experts: int
    d_model: int

    @property
    def width(self):
        return self.values.shape[1]

    def slot(self, k):
        w = 2 * self.d_model + 4
        return self.values[:, k * w:(k + 1) * w]

    def blocks(self, k):
        """(f_model, f_dual, f_mm) views of expert slot ``k``."""
        s = self.slot(k)
        d = self.d_model
        return s[:, :d], s[:, d:2 * d], s[:, 2 * d:]


def assemble_nmt_features_batch(predictor, srcs, tgts, word_indices=None, use_dual=True, chunk=256):
    """Feature matrices for many (source ids, mt ids) pairs.

    ``use_dual=False`` zeroes the dual-model block (ablation of that feature).
    """
    if len(srcs) > chunk:
        out = []
        for start in range(0, len(srcs), chunk):
            wi = None if word_indices is None else word_indices[start:start + chunk]
            out.extend(assemble_nmt_features_batch(predictor, srcs[start:start + chunk], tgts[start:start + chunk],
                                                   wi, use_dual, chunk))
        return out
    k, d = predictor.experts, predictor.config.d_model
    table = predictor.embedding.data
    z_prime = predictor.encode_states(tgts, DUAL) if use_dual else None
    per_expert = [predictor.teacher_forced(srcs, tgts, z, PRIMAL) for z in range(k)]
    out = []
    for i, tgt in enumerate(tgts):
        emb = table[np.asarray(tgt)]
        f_dual = z_prime[i] * emb if use_dual else np.zeros((len(tgt), d), dtype=emb.dtype)
        slots = []
        for z in range(k):
            states, probs = per_expert[z][i]
            slots.extend((states * emb, f_dual, _mismatch_rows(probs, tgt)))
        values = np.concatenate(slots, axis=1).astype(np.float32)
        wi = np.arange(len(tgt)) if word_indices is None else np.asarray(word_indices[i])
        out.append(TokenFeatureMatrix(values, wi, k, d))
    return out


def assemble_nmt_features(predictor, x, y, word_index=None, use_dual=True):
    return assemble_nmt_features_batch(predictor, [x], [y], None if word_index is None else [word_index], use_dual)[0]


def assemble_xlm_features_batch(xlm, srcs, tgts, experts, word_indices=None):
    """XLM stream: f_dual copies f_model; the single slot is tiled ``experts`` times."""
    d = xlm.config.d_model
    table = xlm.token_embedding.data
    out = []
    for i, (states, dists) in enumerate(batch_target_states_and_distributions(xlm, srcs, tgts)):
        tgt = tgts[i]
        f_model = states * table[np.asarray(tgt)]
        slot = np.concatenate([f_model, f_model, _mismatch_rows(dists, tgt)], axis=1)
        values = np.tile(slot, (1, experts)).astype(np.float32)
        wi = np.arange(len(tgt)) if word_indices is None else np.asarray(word_indices[i])
        out.append(TokenFeatureMatrix(values, wi, experts, d))
    return out


def assemble_xlm_features(xlm, pair, experts, word_index=None):
    return assemble_xlm_features_batch(xlm, [pair[0]], [pair[1]], experts,
                                       None if word_index is None else [word_index])[0]


def pool_words(values, word_index, n_words=None):
    """Mean of subword rows sharing a parent word."""
    word_index = np.asarray(word_index)
    if n_words is None:
        n_words = int(word_index.max()) + 1 if word_index.size else 0
    counts = np.bincount(word_index, minlength=n_words)
    if word_index.size == 0 or (counts == 0).any() or word_index.max() >= n_words:
        raise ValueError("word alignment must cover every word with at least one subword")
    sums = np.zeros((n_words, values.shape[1]), dtype=np.float64)
    np.add.at(sums, word_index, values)
    return (sums / counts[:, None]).astype(values.dtype)


def gap_features(word_matrix):
    """Gap ``g`` sits before word ``g``: mean of its two neighbours, or the single neighbour at the edges."""
    word_matrix = np.asarray(word_matrix)
    n = word_matrix.shape[0]
    if n == 0:
        raise ValueError("gap features need at least one word")
    gaps = np.empty((n + 1, word_matrix.shape[1]), dtype=word_matrix.dtype)
    gaps[0] = word_matrix[0]
    gaps[n] = word_matrix[n - 1]
    if n > 1:
        gaps[1:n] = (word_matrix[:-1] + word_matrix[1:]) / 2
    return gaps
