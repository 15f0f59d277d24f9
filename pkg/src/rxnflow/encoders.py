"""Graph encoder (reactant/product -> per-atom latents) and condition encoder
(agent set -> h_c = [h_freq, h_set])."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import MLP, LayerNorm, Linear, Module, Tensor
from .autodiff import ops as T
from .autodiff.nn import uniform_init
from .chemgraph import FP_WIDTH, MolGraph, canonical_smiles, fingerprint

ELEMENT_VOCAB = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "B")
N_ELEMENT = len(ELEMENT_VOCAB) + 1  # last slot = any other element
N_CHARGE = 13
MAX_DEGREE = 5
ATOM_FEATURES = N_ELEMENT + N_CHARGE + 1 + (MAX_DEGREE + 1)
BOND_CLASSES = 6  # 0, 1, 1.5, 2, 3, self
_ORDER_TO_CLASS = {0.0: 0, 1.0: 1, 1.5: 2, 2.0: 3, 3.0: 4}


class AtomCountError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 3
    hidden_dim: int = 64
    heads: int = 4
    max_atoms: int = 64

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def atom_features(g: MolGraph) -> np.ndarray:
    n = g.n_atoms
    x = np.zeros((n, ATOM_FEATURES))
    deg = np.minimum(g.degree(), MAX_DEGREE)
    for i, a in enumerate(g.atoms):
        e = ELEMENT_VOCAB.index(a.element) if a.element in ELEMENT_VOCAB else N_ELEMENT - 1
        x[i, e] = 1.0
        x[i, N_ELEMENT + a.charge + 6] = 1.0
        x[i, N_ELEMENT + N_CHARGE] = float(a.aromatic)
        x[i, N_ELEMENT + N_CHARGE + 1 + deg[i]] = 1.0
    return x


def bond_classes(g: MolGraph) -> np.ndarray:
    n = g.n_atoms
    cls = np.zeros((n, n), dtype=np.int64)
    for o, c in _ORDER_TO_CLASS.items():
        cls[g.adj == o] = c
    cls[np.arange(n), np.arange(n)] = BOND_CLASSES - 1
    return cls


def bond_onehot(classes: np.ndarray) -> np.ndarray:
    """(..., N, N) integer classes -> (..., N, N, BOND_CLASSES) indicator."""
    return np.eye(BOND_CLASSES)[classes]


class EdgeAttentionBlock(Module):
    """Pre-LN transformer block whose attention logits carry an additive,
    per-head bias looked up from the bond class of each atom pair."""

    def __init__(self, d: int, heads: int, rng):
        super().__init__()
        self.d, self.heads = d, heads
        self.ln1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.param("edge_bias", np.zeros((BOND_CLASSES, heads)))
        self.ln2 = LayerNorm(d)
        self.ff = MLP([d, 2 * d, d], rng)

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        dh = self.d // self.heads
        return T.transpose(T.reshape(x, (b, n, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, edges: Tensor) -> Tensor:
        """``x``: (B, N, d); ``edges``: constant (B, N, N, BOND_CLASSES) one-hot."""
        b, n, d = x.shape
        h = self.ln1(x)
        q = self._split(self.q(h), b, n)
        k = self._split(self.k(h), b, n)
        v = self._split(self.v(h), b, n)
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        bias = T.transpose(T.matmul(edges, self.edge_bias), (0, 3, 1, 2))
        att = T.softmax(T.add(logits, bias))
        mixed = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        x = T.add(x, self.o(mixed))
        return T.add(x, self.ff(self.ln2(x)))


class GraphEncoder(Module):
    """Stacked edge-aware attention over atoms; no positional encoding, so the
    output is equivariant under atom permutation."""

    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(ATOM_FEATURES, cfg.hidden_dim, rng)
        for i in range(cfg.layers):
            setattr(self, f"block{i}", EdgeAttentionBlock(cfg.hidden_dim, cfg.heads, rng))
        self.ln_out = LayerNorm(cfg.hidden_dim)

    def __call__(self, feats, edges) -> Tensor:
        """``feats``: (B, N, ATOM_FEATURES); ``edges``: (B, N, N, BOND_CLASSES)."""
        if feats.shape[1] > self.cfg.max_atoms:
            raise AtomCountError(f"{feats.shape[1]} atoms exceeds max_atoms={self.cfg.max_atoms}")
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        edges = edges if isinstance(edges, Tensor) else Tensor(edges)
        x = self.embed(feats)
        for i in range(self.cfg.layers):
            x = getattr(self, f"block{i}")(x, edges)
        return self.ln_out(x)

    def encode_graphs(self, graphs: Sequence[MolGraph]) -> Tensor:
        """Encode equally sized graphs as one batch."""
        sizes = {g.n_atoms for g in graphs}
        if len(sizes) != 1:
            raise ValueError(f"batch graphs must share an atom count, got {sorted(sizes)}")
        feats = np.stack([atom_features(g) for g in graphs])
        edges = np.stack([bond_onehot(bond_classes(g)) for g in graphs])
        return self(feats, edges)


def encode_reactant(g: MolGraph, encoder: GraphEncoder) -> np.ndarray:
    """|V| x d latent matrix for one graph."""
    return encoder.encode_graphs([g]).data[0]


# ------------------------------------------------------------ condition side


class FrequencyTable:
    """The K most frequent agents by canonical string; counts per reaction."""

    def __init__(self, entries: Iterable[tuple[str, int]]):
        self.entries = list(entries)
        self.index = {s: i for i, (s, _) in enumerate(self.entries)}

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, smiles: str):
        return smiles in self.index

    def rank(self, smiles: str) -> int | None:
        return self.index.get(smiles)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s, c in self.entries:
                fh.write(f"{c}\t{s}\n")

    @classmethod
    def load(cls, path) -> "FrequencyTable":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                c, s = line.split("\t", 1)
                entries.append((s, int(c)))
        return cls(entries)


def build_frequency_table(agent_sets: Iterable[Sequence[MolGraph]], k: int = 128) -> FrequencyTable:
    """Count canonical agent strings (once per reaction) and keep the top ``k``;
    ties broken lexicographically."""
    counts: Counter = Counter()
    seen_any = False
    for agents in agent_sets:
        seen_any = True
        counts.update({canonical_smiles(a) for a in agents})
    if not seen_any:
        raise ValueError("cannot build a frequency table from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return FrequencyTable(ranked[:k])


def freq_vector(agents: Sequence[MolGraph], table: FrequencyTable, k: int) -> np.ndarray:
    h = np.zeros(k)
    for a in agents:
        r = table.rank(canonical_smiles(a))
        if r is not None and r < k:
            h[r] = 1.0
    return h


class ConditionFeaturizer:
    """Caches fingerprints and frequency bits per canonical agent string."""

    def __init__(self, table: FrequencyTable, k: int = 128, fp_width: int = FP_WIDTH, radius: int = 2):
        self.table, self.k, self.fp_width, self.radius = table, k, fp_width, radius
        self._fp: dict[str, np.ndarray] = {}

    def fp(self, agent: MolGraph) -> np.ndarray:
        key = canonical_smiles(agent)
        got = self._fp.get(key)
        if got is None:
            got = fingerprint(agent, self.radius, self.fp_width).bits.astype(np.float64)
            self._fp[key] = got
        return got

    def batch(self, agent_sets: Sequence[Sequence[MolGraph]]):
        """Returns (h_freq (B, K), fps (B, A, W), mask (B, A)) with A >= 1."""
        b = len(agent_sets)
        a = max([len(s) for s in agent_sets] + [1])
        fps = np.zeros((b, a, self.fp_width))
        mask = np.zeros((b, a), dtype=bool)
        hf = np.zeros((b, self.k))
        for i, agents in enumerate(agent_sets):
            hf[i] = freq_vector(agents, self.table, self.k)
            for j, m in enumerate(agents):
                fps[i, j] = self.fp(m)
                mask[i, j] = True
        return hf, fps, mask


class ConditionEncoder(Module):
    """h_set = gated-attention pooling of MLP_fp(FP(m)) over the agent set.

    Empty sets pool to the zero vector.
    """

    def __init__(self, rng, fp_width: int = FP_WIDTH, hidden: int = 256, out: int = 512, att: int = 128,
                 k: int = 128):
        super().__init__()
        self.k, self.out = k, out
        self.mlp_fp = MLP([fp_width, hidden, out], rng)
        self.att_v = Linear(out, att, rng)
        self.att_u = Linear(out, att, rng)
        self.param("att_w", uniform_init(rng, att, (att, 1)))

    @property
    def width(self) -> int:
        return self.k + self.out

    def pool(self, fps, mask) -> Tensor:
        b, a, _ = fps.shape
        mask = np.asarray(mask, dtype=bool)
        e = self.mlp_fp(Tensor(fps))                                  # (B, A, out)
        gate = T.mul(T.tanh(self.att_v(e)), T.sigmoid(self.att_u(e)))  # (B, A, att)
        score = T.reshape(T.matmul(gate, self.att_w), (b, a))
        w = T.softmax(T.masked_fill(score, ~mask, -1e9))
        pooled = T.reshape(T.matmul(T.reshape(w, (b, 1, a)), e), (b, self.out))
        has = np.repeat(mask.any(axis=1, keepdims=True), self.out, axis=1)
        return T.mul(pooled, Tensor(has.astype(np.float64)))

    def __call__(self, h_freq, fps, mask) -> Tensor:
        return T.concat([Tensor(h_freq), self.pool(fps, mask)], axis=-1)


@dataclass
class ConditionVector:
    h_freq: np.ndarray
    h_set: np.ndarray

    @property
    def h_c(self) -> np.ndarray:
        return np.concatenate([self.h_freq, self.h_set], axis=-1)


def encode_conditions(agents: Sequence[MolGraph], featurizer: ConditionFeaturizer,
                      encoder: ConditionEncoder) -> ConditionVector:
    hf, fps, mask = featurizer.batch([list(agents)])
    h_set = encoder.pool(fps, mask).data[0]
    return ConditionVector(hf[0].astype(h_set.dtype), h_set)
