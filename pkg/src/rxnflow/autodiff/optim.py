from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=3e-4, beta1=0.9, beta2=0.999,
              eps=1e-8) -> bool:
    """In-place Adam update with bias correction.

    ``params`` maps names to tensors (their ``.data`` is replaced), ``grads``
    maps the same names to arrays; missing gradients count as zero. A
    non-finite gradient anywhere skips the whole step and bumps
    ``state.skipped``. Returns whether the update was applied.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.data.shape}")
        v = state.v[name]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name] = m.astype(p.data.dtype, copy=False)
        state.v[name] = v.astype(p.data.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return True


class Adam:
    def __init__(self, named_params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> bool:
        grads = {name: p.grad for name, p in self.params.items()}
        return adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
