"""Conditional vector field v(z, t, h_c) = Phi([z, e_t]) * (1 + gamma) + beta,
the interpolation-path sampler, and the flow-matching loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import MLP, Module, NumericError, ShapeError, Tensor
from .autodiff import ops as T

TIME_DIM = 32
SIGMA = 0.05


# geometric band from pi/4 to 2*pi: smooth on the scale of a few solver steps
TIME_FREQS = np.pi * 2.0 ** (np.arange(TIME_DIM // 2) / 5.0 - 2.0)


def time_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal features [sin(w_k t), cos(w_k t)] over ``TIME_FREQS``.

    ``t`` may be a scalar or an array; the feature axis is appended last.
    """
    if dim != 2 * len(TIME_FREQS):
        raise ValueError(f"time embedding width must be {2 * len(TIME_FREQS)}")
    t = np.asarray(t, dtype=np.float64)
    ang = t[..., None] * TIME_FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _check_t(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError(f"time outside [0, 1]: {t}")


class VectorField(Module):
    """Rowwise base field with FiLM modulation from the condition vector.

    The last layers of both networks start at zero, so the initial field is
    the null field and the initial modulation is the identity.
    """

    def __init__(self, d: int, cond_dim: int, rng, hidden: int = 128, cond_hidden: int = 128):
        super().__init__()
        self.d = d
        self.phi = MLP([d + TIME_DIM, hidden, hidden, d], rng, zero_last=True)
        self.cond = MLP([cond_dim, cond_hidden, 2 * d], rng, zero_last=True)

    # -- pieces
    def film_params(self, h_c) -> tuple[Tensor, Tensor]:
        h_c = h_c if isinstance(h_c, Tensor) else Tensor(h_c)
        out = self.cond(h_c)
        d = self.d
        return T.take(out, np.arange(d), axis=-1), T.take(out, np.arange(d, 2 * d), axis=-1)

    def base_field(self, z: Tensor, t) -> Tensor:
        """``z``: (B, N, d) or (N, d); ``t``: scalar or per-graph (B,)."""
        _check_t(t)
        e = time_embedding(t)
        shape = z.shape
        if e.ndim == 1:
            e = np.broadcast_to(e, shape[:-1] + (TIME_DIM,))
        else:
            e = np.broadcast_to(e[:, None, :], shape[:-1] + (TIME_DIM,))
        return self.phi(T.concat([z, Tensor(np.ascontiguousarray(e))], axis=-1))

    def __call__(self, z: Tensor, t, film: tuple[Tensor, Tensor] | None) -> Tensor:
        v = self.base_field(z, t)
        if film is None:
            return v
        return apply_film(v, *film)

    # -- inference helpers (plain arrays)
    def fold_time_bias(self, times) -> np.ndarray:
        """First-layer bias with the time features folded in, one row per time."""
        w0 = self.phi.l0.weight.data
        b0 = self.phi.l0.bias.data
        e = time_embedding(np.asarray(times))
        return e @ w0[self.d:].astype(np.float64) + b0

    def kernel_weights(self):
        p = self.phi
        return (p.l0.weight.data[: self.d], p.l1.weight.data, p.l1.bias.data,
                p.l2.weight.data, p.l2.bias.data)


def apply_film(v_base: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """v_base * (1 + gamma) + beta with per-graph gamma/beta broadcast over atoms.

    Shapes: v_base (B, N, d) with gamma/beta (B, d), or v_base (N, d) with (d,).
    """
    if gamma.shape != beta.shape or gamma.shape[-1] != v_base.shape[-1]:
        raise ShapeError(f"apply_film: widths {v_base.shape}, {gamma.shape}, {beta.shape}")
    if v_base.ndim == 3:
        if gamma.ndim != 2 or gamma.shape[0] != v_base.shape[0]:
            raise ShapeError(f"apply_film: batch mismatch {v_base.shape} vs {gamma.shape}")
        n = v_base.shape[1]
        g1 = T.expand(T.add_scalar(gamma, 1.0), n, axis=1)
        return T.add(T.mul(v_base, g1), T.expand(beta, n, axis=1))
    return T.add(T.mul(v_base, T.add_scalar(gamma, 1.0)), beta)


@dataclass
class PathSample:
    t: np.ndarray
    z_t: Tensor
    target: Tensor
    sigma: float


def sample_path(z_r: Tensor, z_p: Tensor, sigma: float = SIGMA, rng=None, t=None, eps=None) -> PathSample:
    """z_t = (1 - t) z_r + t z_p + sigma * eps with t ~ U(0, 1) per graph.

    Pre-drawn ``t``/``eps`` may be passed to make the sample a deterministic
    function of its inputs (used for gradient checks and replay).
    """
    if z_r.shape != z_p.shape:
        raise ShapeError(f"sample_path: z_r {z_r.shape} vs z_p {z_p.shape}")
    batched = z_r.ndim == 3
    if t is None:
        t = rng.uniform(size=z_r.shape[0] if batched else None)
    if eps is None:
        eps = rng.standard_normal(z_r.shape)
    t = np.asarray(t, dtype=np.float64)
    tt = np.broadcast_to(t[:, None, None] if batched else t, z_r.shape)
    a = Tensor(np.ascontiguousarray(1.0 - tt))
    b = Tensor(np.ascontiguousarray(tt))
    z_t = T.add(T.add(T.mul(z_r, a), T.mul(z_p, b)), T.scale(Tensor(eps), sigma))
    return PathSample(t, z_t, T.sub(z_p, z_r), sigma)


def flow_loss(sample: PathSample, field: VectorField, film) -> Tensor:
    """Mean squared error between v(z_t, t, h_c) and the displacement target."""
    v = field(sample.z_t, sample.t, film)
    loss = T.mse(v, sample.target)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite flow loss")
    return loss
