"""Minimal numpy optimizers: AdamW, momentum SGD, cosine schedule.

Parameters are updated in place; each optimizer keeps one slot of state per
parameter array it was built with.
"""
from __future__ import annotations

import math

import numpy as np


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # decoupled weight decay, applied to the parameter directly
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            # bias correction
            m_hat = m / bc1
            v_hat = v / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    """SGD with heavy-ball momentum; weight decay folded into the gradient."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g, vel in zip(self.params, grads, self.velocity):
            eff = g + self.weight_decay * p if self.weight_decay else g
            vel *= self.momentum
            vel += eff
            p -= self.lr * vel


def cosine_lr(step: int, total_steps: int, max_lr: float, min_lr: float) -> float:
    """Half-cosine decay from max_lr at step 0 to min_lr at step total_steps."""
    if total_steps <= 0:
        return max_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
