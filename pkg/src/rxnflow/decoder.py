"""Residual bond-edit decoder: scaffold-anchored fusion, a small edge-aware
trunk, bilinear increment/decrement heads and per-atom property heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import MLP, Linear, Module, ShapeError, Tensor
from .autodiff import ops as T
from .chemgraph import Atom, MolGraph
from .encoders import EdgeAttentionBlock

BOND_LEVELS = np.array([0.0, 1.0, 1.5, 2.0, 3.0])
N_CHARGE = 13
PRIOR_LOGIT = 4.0


class Fuse(Module):
    """z_in = skip([z_r | dz]) + MLP([z_r | dz]); the skip starts as [I; 0] and
    the MLP's last layer at zero, so z_in = z_r at initialization."""

    def __init__(self, d: int, rng):
        super().__init__()
        self.d = d
        self.param("skip", np.vstack([np.eye(d), np.zeros((d, d))]))
        self.mlp = MLP([2 * d, d, d], rng, zero_last=True)

    def __call__(self, z_r: Tensor, z_hat: Tensor) -> Tensor:
        if z_r.shape != z_hat.shape:
            raise ShapeError(f"fuse: z_r {z_r.shape} vs z_hat {z_hat.shape}")
        x = T.concat([z_r, T.sub(z_hat, z_r)], axis=-1)
        return T.add(T.matmul(x, self.skip), self.mlp(x))


class PairHead(Module):
    """M(i, j) = softplus((W_q z_i) . (W_k z_j) / sqrt(d) + b), symmetrized,
    zero diagonal. W_k starts at zero so every entry starts at softplus(0)."""

    def __init__(self, d: int, rng):
        super().__init__()
        self.d = d
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng, zero=True)
        self.param("shift", np.zeros(1))

    def __call__(self, h: Tensor) -> Tensor:
        b, n, _ = h.shape
        s = T.matmul(self.q(h), T.transpose(self.k(h), (0, 2, 1)))
        s = T.add(T.scale(s, 1.0 / math.sqrt(self.d)), _bias_like(self.shift, (b, n, n)))
        m = T.softplus(s)
        m = T.scale(T.add(m, T.transpose(m, (0, 2, 1))), 0.5)
        off = np.ones((n, n)) - np.eye(n)
        return T.mul(m, Tensor(np.broadcast_to(off, (b, n, n)).copy()))


def _bias_like(scalar: Tensor, shape) -> Tensor:
    """Broadcast a 1-element parameter to ``shape`` via a row-vector add."""
    x = T.reshape(scalar, (1,))
    return T.reshape(T.expand(x, int(np.prod(shape)), axis=0), shape)


@dataclass
class DecoderOutput:
    m_inc: Tensor
    m_dec: Tensor
    charge_logits: Tensor
    arom_logits: Tensor

    def numpy(self, i: int | None = None):
        """Plain arrays, optionally for one batch element."""
        arrs = (self.m_inc.data, self.m_dec.data, self.charge_logits.data, self.arom_logits.data)
        return arrs if i is None else tuple(a[i] for a in arrs)


class Decoder(Module):
    def __init__(self, d: int, heads: int, layers: int, rng):
        super().__init__()
        self.d, self.layers = d, layers
        self.fuse = Fuse(d, rng)
        for i in range(layers):
            setattr(self, f"block{i}", EdgeAttentionBlock(d, heads, rng))
        self.inc = PairHead(d, rng)
        self.dec = PairHead(d, rng)
        self.charge = Linear(d, N_CHARGE, rng, zero=True)
        self.arom = Linear(d, 1, rng, zero=True)

    def trunk(self, z_in: Tensor, edges) -> Tensor:
        h = z_in
        edges = edges if isinstance(edges, Tensor) else Tensor(edges)
        for i in range(self.layers):
            h = getattr(self, f"block{i}")(h, edges)
        return h

    def __call__(self, z_r: Tensor, z_hat: Tensor, edges, r_charge: np.ndarray, r_arom: np.ndarray) -> DecoderOutput:
        """``r_charge`` (B, N) ints and ``r_arom`` (B, N) bools are the reactant's
        own labels, fed as fixed prior logits so untrained heads copy them."""
        z_in = self.fuse(z_r, z_hat)
        h = self.trunk(z_in, edges)
        prior_q = PRIOR_LOGIT * np.eye(N_CHARGE)[np.asarray(r_charge) + 6]
        prior_a = PRIOR_LOGIT * (2.0 * np.asarray(r_arom, dtype=np.float64) - 1.0)
        q = T.add(self.charge(h), Tensor(prior_q))
        a = T.add(T.reshape(self.arom(h), prior_a.shape), Tensor(prior_a))
        return DecoderOutput(self.inc(h), self.dec(h), q, a)


# ------------------------------------------------------------ discretization


def round_bonds(a_hat: np.ndarray) -> np.ndarray:
    """Clamp to [0, 3] and snap each entry to the nearest of {0, 1, 1.5, 2, 3};
    exact midpoints go to the lower level."""
    x = np.clip(np.asarray(a_hat, dtype=np.float64), 0.0, 3.0)
    dist = np.abs(x[..., None] - BOND_LEVELS)
    return BOND_LEVELS[np.argmin(dist, axis=-1)]  # argmin picks the first (lower) level on ties


def decode_product(reactant: MolGraph, m_inc: np.ndarray, m_dec: np.ndarray, charge_logits: np.ndarray,
                   arom_logits: np.ndarray) -> MolGraph:
    """Apply A_r + (M_inc - M_dec), discretize, read per-atom labels.

    The result lives on the reactant indexing and is not repaired: it may
    violate valence rules.
    """
    n = reactant.n_atoms
    a_hat = reactant.adj + (np.asarray(m_inc, np.float64) - np.asarray(m_dec, np.float64))
    a_hat = 0.5 * (a_hat + a_hat.T)
    adj = round_bonds(a_hat)
    adj[np.arange(n), np.arange(n)] = 0.0
    charges = np.argmax(charge_logits, axis=-1) - 6
    arom = np.asarray(arom_logits) > 0.0  # sigmoid(x) > 0.5
    atoms = tuple(Atom(a.element, int(c), bool(r), a.amap) for a, c, r in zip(reactant.atoms, charges, arom))
    return MolGraph(atoms, adj)


# ------------------------------------------------------------------- loss


def center_weights(delta: np.ndarray, w_center: float) -> np.ndarray:
    return np.where(delta != 0, w_center, 1.0)


def struct_loss(out: DecoderOutput, delta: np.ndarray, charge_labels: np.ndarray, arom_labels: np.ndarray,
                w_center: float = 10.0, lambda_prop: float = 1.0) -> tuple[Tensor, dict]:
    """Weighted MSE of (M_inc - M_dec) against A_p - A_r over all N^2 entries,
    plus lambda_prop * (charge cross-entropy + aromatic binary cross-entropy)."""
    delta = np.asarray(delta)
    if out.m_inc.shape != delta.shape:
        raise ShapeError(f"struct_loss: prediction {out.m_inc.shape} vs truth {delta.shape}")
    diff = T.sub(T.sub(out.m_inc, out.m_dec), Tensor(delta))
    bond = T.mean(T.mul(T.square(diff), Tensor(center_weights(delta, w_center))))
    parts = {"bond": bond}
    total = bond
    if lambda_prop:
        ce = T.cross_entropy(out.charge_logits, np.asarray(charge_labels) + 6)
        bce = T.bce_with_logits(out.arom_logits, np.asarray(arom_labels, dtype=np.float64))
        parts["charge"], parts["arom"] = ce, bce
        total = T.add(total, T.scale(T.add(ce, bce), lambda_prop))
    return total, parts
