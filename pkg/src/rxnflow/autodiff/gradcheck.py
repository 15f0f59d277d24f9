from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tape, Tensor, no_tape


def grad_check(f, params, step: float = 1e-4, probes: int | None = None, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar :class:`Tensor`
    computed from ``params`` (one tensor or a list). With ``probes`` set, that
    many coordinates are drawn at random across all parameters; otherwise
    every coordinate is checked. The error per coordinate is
    ``|a - d| / (|a| + |d| + 1e-8)``.
    """
    if isinstance(params, Tensor):
        params = [params]
    if not 1e-4 <= step <= 1e-2:
        raise ValueError(f"step {step} outside [1e-4, 1e-2]")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if probes is not None and probes < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_tape():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            up = float(f().data)
            flat[j] = orig - step
            down = float(f().data)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing parameter {i} coordinate {j}")
            num = (up - down) / (2 * step)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - num) / (abs(ana) + abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
