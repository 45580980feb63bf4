"""AdamW with decoupled weight decay, shared by dense and sparse updates."""

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


def adamw_update(param, grad, m, v, step, hp):
    """One in-place AdamW step.

    ``step`` is the 1-based step count after this update; it may be an array
    broadcastable against ``param`` for per-row counts.
    """
    dtype = param.dtype
    param *= dtype.type(1.0 - hp.lr * hp.weight_decay)
    m *= dtype.type(hp.beta1)
    m += dtype.type(1.0 - hp.beta1) * grad
    v *= dtype.type(hp.beta2)
    v += dtype.type(1.0 - hp.beta2) * grad * grad
    bc1 = (1.0 - hp.beta1 ** np.asarray(step, dtype=np.float64)).astype(dtype)
    bc2 = (1.0 - hp.beta2 ** np.asarray(step, dtype=np.float64)).astype(dtype)
    param -= dtype.type(hp.lr) * (m / bc1) / (np.sqrt(v / bc2) + dtype.type(hp.eps))


class AdamW:
    """Dense AdamW over a dict of named arrays, one global step count."""

    def __init__(self, hp):
        self.hp = hp
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            adamw_update(p, grads[name].astype(p.dtype, copy=False), self.m[name], self.v[name], self.t, self.hp)
