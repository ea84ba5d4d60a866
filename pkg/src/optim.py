"""AdamW, the warmup + cosine learning-rate schedule and gradient clipping."""
from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices and kernels only."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.tensor.ndim > 1:
                update = update + self.weight_decay * p.tensor.data
            p.tensor.data = (p.tensor.data - lr * update).astype(p.tensor.dtype)


def learning_rate(step, total_steps, base_lr, warmup_fraction=0.01):
    """Linear warmup over ``warmup_fraction`` of the run, then cosine decay to 0."""
    warmup = int(round(warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm):
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.tensor.grad for p in params if p.tensor.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.grad = p.tensor.grad * scale
    return total
