"""Assembled model: shared graph encoder, condition encoder, vector field and
residual decoder, with batch construction, the training losses and the
inference path (trajectories, decoding, candidate ranking)."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import diagnostics as dg
from .autodiff import Module, RngStreams, Tensor, no_tape
from .autodiff import ops as T
from .chemgraph import MolGraph, ReactionRecord, combine, graphs_equal
from .decoder import Decoder, decode_product, struct_loss
from .encoders import (ConditionEncoder, ConditionFeaturizer, EncoderConfig, GraphEncoder, atom_features,
                       bond_classes, bond_onehot)
from .flowfield import SIGMA, VectorField, flow_loss, sample_path
from .odesolver import SolverConfig, integrate_differentiable, integrate_mlp


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    enc_layers: int = 3
    heads: int = 4
    dec_layers: int = 2
    field_hidden: int = 128
    cond_hidden: int = 128
    k: int = 128
    fp_width: int = 512
    max_atoms: int = 64
    disable_flow: bool = False
    disable_film: bool = False
    agents_in_input: bool = False

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


class RxnFlowModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = RngStreams(seed).stream("init")
        self.encoder = GraphEncoder(EncoderConfig(cfg.enc_layers, cfg.d, cfg.heads, cfg.max_atoms), rng)
        self.cond = ConditionEncoder(rng, fp_width=cfg.fp_width, k=cfg.k)
        self.field = VectorField(cfg.d, self.cond.width, rng, hidden=cfg.field_hidden, cond_hidden=cfg.cond_hidden)
        self.decoder = Decoder(cfg.d, cfg.heads, cfg.dec_layers, rng)

    # ----------------------------------------------------------- pieces
    def encode(self, batch: "Batch") -> tuple[Tensor, Tensor]:
        """z_r and z_p from one shared-encoder pass over the stacked 2B graphs."""
        b, n = batch.size, batch.n
        feats = np.concatenate([batch.feat_r, batch.feat_p])
        edges = np.concatenate([batch.edges_r, batch.edges_p])
        z = self.encoder(feats, edges)
        z_r = T.take(z, np.arange(b), axis=0)
        z_p = T.take(z, np.arange(b, 2 * b), axis=0)
        if batch.n_in != n:
            z_r = T.take(z_r, np.arange(n), axis=1)
            z_p = T.take(z_p, np.arange(n), axis=1)
        return z_r, z_p

    def encode_reactants(self, batch: "Batch") -> Tensor:
        z = self.encoder(batch.feat_r, batch.edges_r)
        if batch.n_in != batch.n:
            z = T.take(z, np.arange(batch.n), axis=1)
        return z

    def film(self, batch: "Batch"):
        if self.cfg.disable_film:
            return None
        h_c = self.cond(batch.h_freq, batch.fps, batch.mask)
        return self.field.film_params(h_c)

    def decode(self, z_r: Tensor, z_hat: Tensor, batch: "Batch"):
        return self.decoder(z_r, z_hat, batch.edges_dec, batch.q_r, batch.a_r)

    # ----------------------------------------------------------- training
    def losses(self, batch: "Batch", draws: dict, train_solver=("heun", 5), sigma: float = SIGMA,
               lambda_flow: float = 1.0, lambda_prop: float = 1.0, w_center: float = 10.0) -> dict:
        """All loss terms as tape tensors; ``draws`` holds the pre-drawn
        stochastic inputs (path times ``t``, path noise ``eps``, solver start
        noise ``eps0``), so the result is a deterministic function of the
        parameters."""
        z_r, z_p = self.encode(batch)
        film = self.film(batch)
        out = {}
        if self.cfg.disable_flow:
            z_hat = z_r
        else:
            ps = sample_path(z_r, z_p, sigma, t=draws["t"], eps=draws["eps"])
            out["flow"] = flow_loss(ps, self.field, film)
            z0 = T.add(z_r, Tensor(sigma * draws["eps0"])) if sigma else z_r
            scheme, steps = train_solver
            z_hat = integrate_differentiable(z0, lambda z, t: self.field(z, t, film), scheme, steps)
        dec = self.decode(z_r, z_hat, batch)
        s, parts = struct_loss(dec, batch.delta, batch.q_p, batch.a_p, w_center, lambda_prop)
        out["struct"] = s
        out.update({f"struct_{k}": v for k, v in parts.items()})
        total = s
        if "flow" in out and lambda_flow:
            total = T.add(total, T.scale(out["flow"], lambda_flow))
        out["total"] = total
        return out

    def draw(self, batch: "Batch", rngs: RngStreams) -> dict:
        shape = (batch.size, batch.n, self.cfg.d)
        return {"t": rngs.stream("path_t").uniform(size=batch.size),
                "eps": rngs.stream("path_eps").standard_normal(shape),
                "eps0": rngs.stream("solver_eps").standard_normal(shape)}

    # ---------------------------------------------------------- inference
    def trajectories(self, batch: "Batch", solver: SolverConfig, sigma: float = 0.0, rng=None,
                     z_r: Optional[np.ndarray] = None, backend=None):
        """Integrate every graph of the batch from z_r (+ sigma noise).

        Returns (z_r array (B, N, d), recorded states (P, B, N, d)).
        """
        with no_tape():
            if z_r is None:
                z_r = self.encode_reactants(batch).data
            b, n, d = z_r.shape
            if self.cfg.disable_flow:
                return z_r, np.repeat(z_r[None], len(solver.record_points), axis=0)
            film = self.film(batch)
            if film is None:
                g1 = np.ones((b, d), dtype=z_r.dtype)
                be = np.zeros((b, d), dtype=z_r.dtype)
            else:
                g1 = 1.0 + film[0].data
                be = film[1].data
        z0 = z_r if not sigma else z_r + sigma * rng.standard_normal(z_r.shape).astype(z_r.dtype)
        tb = self.field.fold_time_bias(np.arange(2 * solver.steps + 1) / (2 * solver.steps))
        rows = lambda a: np.repeat(a, n, axis=0)  # noqa: E731 - per-graph -> per-row
        _, traj = integrate_mlp(z0.reshape(b * n, d), self.field.kernel_weights(), tb, rows(g1), rows(be),
                                solver, backend=backend)
        return z_r, np.stack([s.reshape(b, n, d) for s in traj.states])

    def decode_states(self, batch: "Batch", z_r: np.ndarray, states: np.ndarray) -> list[list[MolGraph]]:
        """Decode stacked states (P, B, N, d) -> graphs[b][p]."""
        p, b, n, d = states.shape
        rep = lambda a: np.concatenate([a] * p)  # noqa: E731
        with no_tape():
            out = self.decoder(Tensor(np.concatenate([z_r] * p)), Tensor(states.reshape(p * b, n, d)),
                               rep(batch.edges_dec), rep(batch.q_r), rep(batch.a_r))
        m_inc, m_dec, q, a = out.numpy()
        graphs = [[None] * p for _ in range(b)]
        for k in range(p):
            for i in range(b):
                j = k * b + i
                graphs[i][k] = decode_product(batch.reactants[i], m_inc[j], m_dec[j], q[j], a[j])
        return graphs


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    records: list
    reactants: list
    products: list
    agents: list
    n: int
    n_in: int
    feat_r: np.ndarray
    edges_r: np.ndarray
    feat_p: np.ndarray
    edges_p: np.ndarray
    edges_dec: np.ndarray
    delta: np.ndarray
    q_r: np.ndarray
    a_r: np.ndarray
    q_p: np.ndarray
    a_p: np.ndarray
    h_freq: np.ndarray
    fps: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.records)


def make_batch(records: Sequence[ReactionRecord], featurizer: ConditionFeaturizer, cfg: ModelConfig) -> Batch:
    """Stack equally sized reactions. With ``agents_in_input`` the agent graphs
    are appended as extra components to both sides before encoding."""
    recs = list(records)
    reactants = [r.reactant for r in recs]
    products = [r.product for r in recs]
    agents = [list(r.agents) for r in recs]
    sizes = {g.n_atoms for g in reactants}
    if len(sizes) != 1:
        raise ValueError(f"batch reactants must share an atom count, got {sorted(sizes)}")
    n = sizes.pop()
    if cfg.agents_in_input:
        enc_r = [combine([g] + a) for g, a in zip(reactants, agents)]
        enc_p = [combine([g] + a) for g, a in zip(products, agents)]
        if len({g.n_atoms for g in enc_r}) != 1:
            raise ValueError("with agents_in_input, batch reactant+agent graphs must share an atom count")
    else:
        enc_r, enc_p = reactants, products
    n_in = enc_r[0].n_atoms
    onehot = lambda gs: np.stack([bond_onehot(bond_classes(g)) for g in gs])  # noqa: E731
    feats = lambda gs: np.stack([atom_features(g) for g in gs])  # noqa: E731
    edges_r = onehot(enc_r)
    edges_dec = edges_r if n_in == n else onehot(reactants)
    hf, fps, mask = featurizer.batch(agents)
    return Batch(
        recs, reactants, products, agents, n, n_in,
        feats(enc_r), edges_r, feats(enc_p), onehot(enc_p), edges_dec,
        np.stack([p.adj - r.adj for r, p in zip(reactants, products)]),
        np.stack([r.charges for r in reactants]), np.stack([r.aromatic for r in reactants]),
        np.stack([p.charges for p in products]), np.stack([p.aromatic for p in products]),
        hf, fps, mask,
    )


def input_size(record: ReactionRecord, cfg: ModelConfig) -> tuple[int, int]:
    n = record.reactant.n_atoms
    if cfg.agents_in_input:
        return n, n + sum(a.n_atoms for a in record.agents)
    return n, n


def bucketize(records: Sequence[ReactionRecord], cfg: ModelConfig) -> dict:
    buckets: dict = {}
    for i, r in enumerate(records):
        buckets.setdefault(input_size(r, cfg), []).append(i)
    return buckets


# ---------------------------------------------------------------- candidates


@dataclass
class Candidate:
    graph: MolGraph
    graphs: list
    pooled: np.ndarray
    speed: float
    dwell: int
    votes: int = 1


@dataclass
class Prediction:
    record: ReactionRecord
    candidates: list
    trajectory: list        # decoded graphs of the first draw
    pooled: np.ndarray      # pooled states of the first draw
    states: np.ndarray = field(repr=False, default=None)


def rank_candidates(items: Sequence[tuple[list, np.ndarray]], tau_sim: float = dg.SIM_THRESHOLD) -> list[Candidate]:
    """Deduplicate final graphs (first occurrence wins) and sort by lower
    terminal speed, then longer terminal dwell."""
    out: list[Candidate] = []
    for graphs, pooled in items:
        final = graphs[-1]
        for c in out:
            if graphs_equal(c.graph, final):
                c.votes += 1
                break
        else:
            speeds = dg.step_speeds(pooled)
            links = dg.similar_links(graphs, tau_sim)
            out.append(Candidate(final, graphs, pooled, dg.terminal_speed(speeds), dg.terminal_plateau(links)))
    order = sorted(range(len(out)), key=lambda i: (out[i].speed, -out[i].dwell, i))
    return [out[i] for i in order]


def predict_batch(model: RxnFlowModel, batch: Batch, solver: SolverConfig, k: int = 1, sigma: float = SIGMA,
                  rng=None, final_only: bool = False, backend=None) -> list[Prediction]:
    """k noisy draws per reaction, decoded along the recorded grid and ranked."""
    with no_tape():
        z_r = model.encode_reactants(batch).data
    draws = []
    for _ in range(k):
        _, states = model.trajectories(batch, solver, sigma, rng, z_r=z_r, backend=backend)
        sel = states[-1:] if final_only else states
        graphs = model.decode_states(batch, z_r, sel)
        pooled = states.astype(np.float64).mean(axis=2)  # (P, B, d)
        draws.append((states, graphs, pooled))
    preds = []
    for i, rec in enumerate(batch.records):
        items = [(g[i], pooled[:, i]) for _, g, pooled in draws]
        preds.append(Prediction(rec, rank_candidates(items), items[0][0], items[0][1], draws[0][0][:, i]))
    return preds
