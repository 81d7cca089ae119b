from __future__ import annotations

import numpy as np

from .tensor import no_grad


class Adam:
    """Adam with bias correction; per-parameter state lives on the Parameter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {p.name or '<unnamed>'}")
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps, grad_scale=scale)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, grad_scale=1.0):
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.grad if grad_scale == 1.0 else p.grad * grad_scale
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.grad = None


def linear_schedule(base_lr, step, warmup, total, floor=0.1):
    """Linear warmup, then linear decay to ``floor * base_lr`` at ``total``."""
    if step <= warmup:
        return base_lr * step / max(1, warmup)
    frac = (step - warmup) / max(1, total - warmup)
    return base_lr * (1.0 - (1.0 - floor) * min(1.0, frac))


def grad_check(f, params, h=1e-5, floor=1e-4):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor.  The
    denominator is ``max(|analytic|, |numeric|, floor)`` so coordinates whose
    true gradient is ~0 are compared absolutely.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                an = float(a.reshape(-1)[i])
                err = abs(an - num) / max(abs(an), abs(num), floor)
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
