"""Layers built on the tensor engine: parameters, modules, attention, GRU."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own Adam state."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def tensor(self):
        return self

    def reset_state(self):
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


class Module:
    """Attribute-walking container; parameters are discovered by traversal."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.reset_state()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.reset_state()
        return self

    def name_parameters(self):
        for name, p in self.named_parameters():
            p.name = name
        return self


def init_matrix(rng, fan_in, fan_out, dtype=T.DEFAULT_DTYPE):
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = Parameter(init_matrix(rng, fan_in, fan_out))
        self.bias = Parameter(np.zeros(fan_out, dtype=T.DEFAULT_DTYPE)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Parameter(np.ones(dim, dtype=T.DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(dim, dtype=T.DEFAULT_DTYPE))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.outer(T.relu(self.inner(x)))


class AttentionWeights(Module):
    """Bias-free per-head projections, stored as concatenated heads.

    Without biases, zero queries and zero values give an exactly zero output.
    """

    def __init__(self, model_dim, head_count, rng):
        if model_dim % head_count:
            raise ValueError(f"model_dim {model_dim} not divisible by head_count {head_count}")
        self.model_dim = model_dim
        self.head_count = head_count
        self.w_q = Parameter(init_matrix(rng, model_dim, model_dim))
        self.w_k = Parameter(init_matrix(rng, model_dim, model_dim))
        self.w_v = Parameter(init_matrix(rng, model_dim, model_dim))
        self.w_o = Parameter(init_matrix(rng, model_dim, model_dim))


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def multi_head_attention(q_in, k_in, v_in, weights, mask=None):
    """Scaled dot-product attention.

    Inputs are ``(batch, seq, d)`` or ``(seq, d)``.  ``mask`` is boolean and
    broadcastable to ``(batch, q_len, k_len)``; True entries are blocked.
    """
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in, k_in, v_in = (x.reshape(1, *x.shape) for x in (q_in, k_in, v_in))
    d = weights.model_dim
    if q_in.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise ValueError(f"attention width mismatch: expected {d}, got {q_in.shape}, {k_in.shape}, {v_in.shape}")
    b, nq, _ = q_in.shape
    nk = k_in.shape[1]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if squeeze and mask.ndim == 2:
            mask = mask[None]
        try:
            np.broadcast_shapes(mask.shape, (b, nq, nk))
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with attention shape {(b, nq, nk)}") from None
        mask = mask[:, None] if mask.ndim == 3 else mask
    h = weights.head_count
    q = _split_heads(T.matmul(q_in, weights.w_q), h)
    k = _split_heads(T.matmul(k_in, weights.w_k), h)
    v = _split_heads(T.matmul(v_in, weights.w_v), h)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // h))
    attn = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
    out = T.matmul(ctx, weights.w_o)
    return out.reshape(nq, d) if squeeze else out


class GRUDirection(Module):
    """One direction of a GRU; gates packed as [reset, update, candidate]."""

    def __init__(self, input_dim, hidden, rng):
        self.hidden = hidden
        self.w_ih = Parameter(init_matrix(rng, input_dim, 3 * hidden))
        self.w_hh = Parameter(init_matrix(rng, hidden, 3 * hidden))
        self.b_ih = Parameter(np.zeros(3 * hidden, dtype=T.DEFAULT_DTYPE))
        self.b_hh = Parameter(np.zeros(3 * hidden, dtype=T.DEFAULT_DTYPE))

    def run(self, seq, mask, reverse=False):
        """``seq`` is (batch, n, f); ``mask`` (batch, n) marks real positions."""
        b, n, _ = seq.shape
        hd = self.hidden
        gates_x = T.matmul(seq, self.w_ih) + self.b_ih
        h = Tensor(np.zeros((b, hd), dtype=seq.dtype))
        outputs = [None] * n
        steps = range(n - 1, -1, -1) if reverse else range(n)
        for t in steps:
            gx = gates_x[:, t]
            gh = T.matmul(h, self.w_hh) + self.b_hh
            r = T.sigmoid(gx[:, :hd] + gh[:, :hd])
            z = T.sigmoid(gx[:, hd:2 * hd] + gh[:, hd:2 * hd])
            cand = T.tanh(gx[:, 2 * hd:] + r * gh[:, 2 * hd:])
            # h' = (1 - z) * h + z * cand
            h_new = h + z * (cand - h)
            if mask is not None and not mask[:, t].all():
                m = mask[:, t:t + 1].astype(seq.dtype)
                h_new = h + (h_new - h) * m
            h = h_new
            outputs[t] = h
        return T.stack(outputs, axis=1)


class BiGRU(Module):
    def __init__(self, input_dim, hidden, rng):
        self.forward_dir = GRUDirection(input_dim, hidden, rng)
        self.backward_dir = GRUDirection(input_dim, hidden, rng)

    @property
    def hidden(self):
        return self.forward_dir.hidden

    def __call__(self, seq, mask=None):
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.reshape(1, *seq.shape)
        fwd = self.forward_dir.run(seq, mask)
        bwd = self.backward_dir.run(seq, mask, reverse=True)
        out = T.concat([fwd, bwd], axis=-1)
        return out.reshape(out.shape[1], out.shape[2]) if squeeze else out


def gru_bidirectional(seq, weights, mask=None):
    return weights(seq, mask)


def sinusoidal_positions(length, dim, dtype=T.DEFAULT_DTYPE):
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)
