"""Pure-Python/numpy implementations of the compiled kernels.

Must stay bit-identical (integer kernels) or within float rounding
(field integration) of ``_native.pyx``.
"""

from __future__ import annotations

import struct

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def _round_message(own: int, pairs) -> bytes:
    parts = [struct.pack("<Q", own)]
    for code, nb in pairs:
        parts.append(struct.pack("<BQ", code, nb))
    return b"".join(parts)


def fingerprint_bits(init_hashes, nbr_ptr, nbr_idx, nbr_code, radius: int, width: int):
    """Circular hashing: fold every atom's hash of every round 0..radius."""
    n = len(init_hashes)
    bits = np.zeros(width, dtype=np.uint8)
    cur = [int(h) for h in init_hashes]
    for h in cur:
        bits[h % width] = 1
    for _ in range(radius):
        nxt = []
        for a in range(n):
            pairs = sorted((int(nbr_code[k]), cur[int(nbr_idx[k])])
                           for k in range(int(nbr_ptr[a]), int(nbr_ptr[a + 1])))
            nxt.append(fnv1a64(_round_message(cur[a], pairs)))
        cur = nxt
        for h in cur:
            bits[h % width] = 1
    return bits


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def mlp_field(z, temb_bias, w0z, w1, b1, w2, b2, gamma1, beta):
    """Rowwise 3-layer GELU MLP with the time features pre-folded into
    ``temb_bias`` (= e_t @ W0_t + b0), followed by FiLM."""
    h = _gelu(z @ w0z + temb_bias)
    h = _gelu(h @ w1 + b1)
    v = h @ w2 + b2
    return v * gamma1 + beta


def integrate_mlp(z0, tbias, w0z, w1, b1, w2, b2, gamma1, beta, scheme: str, n_steps: int,
                  record_every: int):
    """Fixed-step integration of :func:`mlp_field`, computed in float64.

    ``tbias[k]`` is the folded first-layer bias at time ``k * dt / 2``.
    Returns (states every ``record_every`` steps including t=0, final state).
    """
    if scheme not in ("euler", "heun", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dtype = np.asarray(z0).dtype
    f64 = [np.asarray(a, dtype=np.float64) for a in (z0, tbias, w0z, w1, b1, w2, b2, gamma1, beta)]
    z, tb, w0z, w1, b1, w2, b2, gamma1, beta = f64
    if tb.shape[0] < 2 * n_steps + 1:
        raise ValueError("tbias needs 2 * n_steps + 1 rows")
    dt = 1.0 / n_steps
    states = [z.astype(dtype)]

    def v(x, k):
        return mlp_field(x, tb[k], w0z, w1, b1, w2, b2, gamma1, beta)

    for i in range(n_steps):
        if scheme == "euler":
            z = z + dt * v(z, 2 * i)
        elif scheme == "heun":
            k1 = v(z, 2 * i)
            k2 = v(z + dt * k1, 2 * i + 2)
            z = z + (dt / 2) * (k1 + k2)
        else:
            k1 = v(z, 2 * i)
            k2 = v(z + (dt / 2) * k1, 2 * i + 1)
            k3 = v(z + (dt / 2) * k2, 2 * i + 1)
            k4 = v(z + dt * k3, 2 * i + 2)
            z = z + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (i + 1) % record_every == 0:
            states.append(z.astype(dtype))
    return states, z.astype(dtype)
