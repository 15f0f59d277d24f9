"""Conditioning-cost accounting and latency sweeps.

Input fusion appends L_C agent atoms to the L_R reactant atoms, so every
attention layer sees L_R + L_C tokens. Head modulation keeps L_R tokens and
pays a per-graph FiLM projection instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import RngStreams, no_tape
from ..chemgraph import ReactionRecord
from ..encoders import ATOM_FEATURES, EncoderConfig, GraphEncoder
from ..model import RxnFlowModel, make_batch, predict_batch
from ..odesolver import SolverConfig


def attention_macs(length: int, d: int, layers: int = 1) -> int:
    """Score (QK^T) plus weighted-sum (AV) multiply-accumulates: 2 L^2 d per layer."""
    return 2 * length * length * d * layers


def film_macs(d_c: int, d: int) -> int:
    """Projection of the condition vector to (gamma, beta): d_c * 2d."""
    return d_c * 2 * d


@dataclass
class ConditioningRow:
    l_r: int
    l_c: int
    fusion_attention: int
    film_attention: int
    film_extra: int
    ratio: float
    fusion_seconds: float = float("nan")
    film_seconds: float = float("nan")


def conditioning_counts(l_r: int, l_c: int, d: int = 64, layers: int = 3, d_c: int = 640) -> ConditioningRow:
    fa = attention_macs(l_r + l_c, d, layers)
    ha = attention_macs(l_r, d, layers)
    return ConditioningRow(l_r, l_c, fa, ha, film_macs(d_c, d), fa / ha)


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conditioning(l_r: int = 16, l_cs: Sequence[int] = (0, 8, 16, 32), d: int = 64, layers: int = 3,
                       heads: int = 4, batch: int = 32, d_c: int = 640, repeats: int = 5, seed: int = 0,
                       measure: bool = True) -> list[ConditioningRow]:
    """Analytic attention counts per variant, plus the best-of-``repeats``
    encoder forward time on random graphs of the matching token counts."""
    rng = RngStreams(seed).stream("bench")
    enc = GraphEncoder(EncoderConfig(layers, d, heads, max(l_r + max(l_cs), 1)), rng)
    film = rng.standard_normal((d_c, 2 * d)) / np.sqrt(d_c)
    rows = []
    for l_c in l_cs:
        row = conditioning_counts(l_r, l_c, d, layers, d_c)
        if measure:
            def run(n):
                feats = rng.standard_normal((batch, n, ATOM_FEATURES))
                edges = np.zeros((batch, n, n, 6))
                edges[:, np.arange(n), np.arange(n), 5] = 1.0
                return lambda: enc(feats, edges)
            fused = run(l_r + l_c)
            base = run(l_r)
            h_c = rng.standard_normal((batch, d_c))
            with no_tape():
                row.fusion_seconds = _time(fused, repeats)
                row.film_seconds = _time(lambda: (base(), h_c @ film), repeats)
        rows.append(row)
    return rows


def ordering_matches(rows: Sequence[ConditioningRow]) -> bool:
    """Measured times rank like the analytic counts: fusion slower than FiLM
    whenever it has more tokens, and fusion time increasing in L_C."""
    rows = [r for r in rows if r.l_c > 0]
    if any(not r.fusion_seconds > r.film_seconds for r in rows):
        return False
    order = sorted(rows, key=lambda r: r.l_c)
    return all(a.fusion_seconds < b.fusion_seconds for a, b in zip(order, order[1:]))


@dataclass
class LatencyRow:
    steps: int
    seconds: float
    per_reaction: float


def bench_steps(model: RxnFlowModel, records: Sequence[ReactionRecord], featurizer, steps: Sequence[int] = (10, 20, 50, 100),
                scheme: str = "rk4", repeats: int = 3, seed: int = 0, backend=None) -> list[LatencyRow]:
    """End-to-end predict latency (encode, integrate, decode all recorded
    points, rank) per step count, best of ``repeats``."""
    recs = list(records)
    out = []
    for n in steps:
        solver = SolverConfig(scheme, n)

        def run():
            rng = RngStreams(seed).stream("bench")
            for r in recs:
                batch = make_batch([r], featurizer, model.cfg)
                predict_batch(model, batch, solver, 1, rng=rng, backend=backend)
        sec = _time(run, repeats)
        out.append(LatencyRow(n, sec, sec / max(len(recs), 1)))
    return out
