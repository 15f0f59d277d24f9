"""Trajectory diagnostics: failure taxonomy, gated inference, path geometry,
PCA export and rank correlations between geometry and accuracy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .chemgraph import ChemError, MolGraph, graphs_equal, write_smiles

R_TO_P = "R->P"
R_TO_W = "R->W"
OVERSHOOT = "R->P->[W/R]"
FAILURE = "R->[R/W]->R"
CLASSES = (R_TO_P, R_TO_W, OVERSHOOT, FAILURE)

EPS = 1e-8
TAU_SPEED = 0.15
TAU_PLATEAU = 3
SIM_THRESHOLD = 0.995
LAMBDA = 1.0


@dataclass
class DecodedTrajectory:
    times: list
    graphs: list
    pooled: np.ndarray

    def __post_init__(self):
        self.pooled = np.asarray(self.pooled, dtype=np.float64)
        if not len(self.times) == len(self.graphs) == len(self.pooled):
            raise ValueError("times, graphs and pooled states must have equal length")

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.pooled, axis=0)


# ----------------------------------------------------------------- taxonomy


@dataclass
class TaxonomyVerdict:
    cls: str
    hit_steps: tuple
    final_match: bool


def classify_trajectory(graphs: Sequence[MolGraph], gt: MolGraph, reactant: MolGraph) -> TaxonomyVerdict:
    if isinstance(graphs, DecodedTrajectory):
        graphs = graphs.graphs
    hits = tuple(i for i, g in enumerate(graphs) if graphs_equal(g, gt))
    last = len(graphs) - 1
    final_match = last in hits
    if final_match:
        cls = R_TO_P
    elif hits:
        cls = OVERSHOOT
    elif graphs_equal(graphs[-1], reactant):
        cls = FAILURE
    else:
        cls = R_TO_W
    return TaxonomyVerdict(cls, hits, final_match)


# ---------------------------------------------------------------- similarity


def sim(a: MolGraph, b: MolGraph) -> float:
    """1 - (changed upper-triangle bonds + changed atom labels) / (N(N-1)/2 + N)."""
    n = a.n_atoms
    if b.n_atoms != n:
        raise ValueError(f"sim: atom counts differ ({n} vs {b.n_atoms})")
    iu = np.triu_indices(n, 1)
    bonds = int(np.count_nonzero(a.adj[iu] != b.adj[iu]))
    labels = sum(1 for x, y in zip(a.atoms, b.atoms) if x.charge != y.charge or x.aromatic != y.aromatic)
    return 1.0 - (bonds + labels) / (n * (n - 1) / 2 + n)


def is_valid(g: MolGraph) -> bool:
    """Passes the valence table and can be written as SMILES."""
    if not g.is_valence_valid():
        return False
    try:
        write_smiles(g)
    except ChemError:
        return False
    return True


# ----------------------------------------------------------------------- gate


@dataclass
class GateDecision:
    triggered: bool
    reason: str
    t_star: int
    v_end: float
    plateau: int
    scores: dict = field(default_factory=dict, repr=False)


def step_speeds(pooled: np.ndarray) -> np.ndarray:
    """||z_t - z_{t-1}|| for t = 1..T (list position t-1)."""
    return np.linalg.norm(np.diff(np.asarray(pooled, dtype=np.float64), axis=0), axis=1)


def terminal_speed(speeds: Sequence[float]) -> float:
    t_len = len(speeds)
    t_end = int(math.floor(0.7 * t_len))
    tail = list(speeds)[t_end:t_len]
    return float(np.mean(tail)) if tail else 0.0


def similar_links(graphs: Sequence[MolGraph], threshold: float = SIM_THRESHOLD) -> list[bool]:
    """links[t-1] is True when Sim(M_t, M_{t-1}) >= threshold."""
    return [sim(graphs[t], graphs[t - 1]) >= threshold for t in range(1, len(graphs))]


def terminal_plateau(links: Sequence[bool]) -> int:
    count = 0
    for ok in reversed(links):
        if not ok:
            break
        count += 1
    return count


def run_lengths(links: Sequence[bool]) -> list[int]:
    """Size (in graphs) of the maximal similar run containing each index."""
    n = len(links) + 1
    out = [0] * n
    start = 0
    for t in range(1, n + 1):
        if t == n or not links[t - 1]:
            for k in range(start, t):
                out[k] = t - start
            start = t
    return out


def tagi(pooled: np.ndarray, graphs: Sequence[MolGraph], reactant: MolGraph, tau_speed: float = TAU_SPEED,
         tau_plateau: int = TAU_PLATEAU, sim_threshold: float = SIM_THRESHOLD, lam: float = LAMBDA,
         valid: Optional[Sequence[bool]] = None):
    """Trajectory-aware gated inference.

    Phase I measures terminal speed, the terminal plateau and the best stable
    intermediate t*; phase II replaces the final graph with M_{t*} when the
    final graph is invalid, equals the reactant, or sits at the end of a fast,
    short-lived segment. Returns ``(GateDecision, chosen graph)``.
    """
    big_t = len(graphs) - 1
    if big_t < 1 or len(pooled) != len(graphs):
        raise ValueError("need at least two aligned points")
    speeds = step_speeds(pooled)
    v_end = terminal_speed(speeds)
    links = similar_links(graphs, sim_threshold)
    plateau = terminal_plateau(links)
    runs = run_lengths(links)
    if valid is None:
        valid = [is_valid(g) for g in graphs]
    scores = {}
    for t in range(1, big_t + 1):
        if valid[t] and not graphs_equal(graphs[t], reactant):
            scores[t] = runs[t] - lam * float(speeds[t - 1])
    t_star = max(scores, key=lambda t: (scores[t], -t)) if scores else big_t
    final = graphs[big_t]
    if not valid[big_t]:
        reason = "invalid_final"
    elif graphs_equal(final, reactant):
        reason = "identity_final"
    elif v_end > tau_speed and plateau < tau_plateau:
        reason = "kinetic_instability"
    else:
        reason = "none"
    triggered = reason != "none"
    chosen = graphs[t_star] if triggered else final
    return GateDecision(triggered, reason, int(t_star), v_end, plateau, scores), chosen


# ------------------------------------------------------------------- geometry


@dataclass
class GeometricDescriptors:
    eta: float
    kappa: float
    alpha_min: float  # nan when undefined
    kinetic: float


def geometry(pooled) -> GeometricDescriptors:
    """Path inefficiency, mean curvature, minimum alignment and mean step
    size of a pooled trajectory z_0..z_T (T >= 2)."""
    z = np.asarray(pooled, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 3:
        raise ValueError("geometry needs at least three points (T >= 2)")
    v = np.diff(z, axis=0)
    speeds = np.linalg.norm(v, axis=1)
    length = float(speeds.sum())
    disp = z[-1] - z[0]
    dnorm = float(np.linalg.norm(disp))
    if length == 0.0:
        eta = 1.0
    else:
        # the triangle inequality bounds the ratio below by 1; eps only guards the division
        eta = max(1.0, length / (dnorm + EPS))
    kappa = float(np.linalg.norm(z[2:] - 2 * z[1:-1] + z[:-2], axis=1).mean())
    moving = speeds > 0
    if dnorm == 0.0 or not moving.any():
        alpha = float("nan")
    else:
        cos = (v[moving] @ disp) / (speeds[moving] * dnorm)
        alpha = float(np.clip(cos.min(), -1.0, 1.0))
    return GeometricDescriptors(eta, kappa, alpha, float(speeds.mean()))


# ------------------------------------------------------------------------ PCA


@dataclass
class Projection:
    coords: np.ndarray
    axes: np.ndarray
    explained: np.ndarray
    degenerate: bool


def pca_project(points, dims: int = 2, seed: int = 0, max_iter: int = 2000, tol: float = 1e-12) -> Projection:
    """Top principal axes by power iteration with deflation.

    When the covariance has fewer than ``dims`` non-negligible directions the
    missing axes are dropped and ``degenerate`` is set.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_project needs at least two points")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    axes, lams = [], []
    work = cov.copy()
    for _ in range(min(dims, x.shape[1])):
        vec = rng.standard_normal(x.shape[1])
        vec /= np.linalg.norm(vec)
        lam = 0.0
        for _ in range(max_iter):
            nxt = work @ vec
            nrm = np.linalg.norm(nxt)
            if nrm == 0.0:
                break
            nxt /= nrm
            done = min(np.linalg.norm(nxt - vec), np.linalg.norm(nxt + vec)) < tol
            vec = nxt
            if done:
                break
        lam = float(vec @ cov @ vec)
        if total <= 0 or lam <= 1e-12 * max(total, 1e-300):
            break
        # fix the sign so the largest-magnitude loading is positive
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        axes.append(vec)
        lams.append(lam)
        work = work - lam * np.outer(vec, vec)
    axes_arr = np.array(axes).reshape(len(axes), x.shape[1])
    explained = np.array(lams) / total if total > 0 else np.zeros(0)
    return Projection(xc @ axes_arr.T, axes_arr, explained, len(axes) < dims)


# ---------------------------------------------------------------- correlation


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    rx, ry = average_ranks(x), average_ranks(y)
    if len(rx) != len(ry):
        raise ValueError("spearman: length mismatch")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    return float("nan") if den == 0 else float(dx @ dy) / den


DESCRIPTORS = ("alpha_min", "kinetic", "eta", "kappa")


@dataclass
class CorrelationReport:
    groups: list  # rows: dict(group, n, accuracy, <descriptor means>)
    rho: dict
    excluded: tuple = ()


def correlation_report(rows: Iterable[dict], key: str = "group", correct: str = "correct",
                       descriptors: Sequence[str] = DESCRIPTORS, exclude: Sequence = ()) -> CorrelationReport:
    """Per-group mean descriptors vs group accuracy, Spearman rho per descriptor.

    ``exclude`` lists group keys treated as outliers and left out.
    """
    buckets: dict = {}
    for r in rows:
        if r[key] in exclude:
            continue
        buckets.setdefault(r[key], []).append(r)
    if len(buckets) < 3:
        raise ValueError(f"correlation_report needs >= 3 groups, got {len(buckets)}")
    table = []
    for g in sorted(buckets, key=str):
        items = buckets[g]
        row = {"group": g, "n": len(items), "accuracy": float(np.mean([bool(r[correct]) for r in items]))}
        for d in descriptors:
            vals = [float(r[d]) for r in items if r.get(d) is not None and not math.isnan(float(r[d]))]
            row[d] = float(np.mean(vals)) if vals else float("nan")
        table.append(row)
    acc = [row["accuracy"] for row in table]
    rho = {}
    for d in descriptors:
        pairs = [(row[d], a) for row, a in zip(table, acc) if not math.isnan(row[d])]
        rho[d] = spearman([p[0] for p in pairs], [p[1] for p in pairs]) if len(pairs) >= 3 else float("nan")
    return CorrelationReport(table, rho, tuple(exclude))


# ----------------------------------------------------------------------- I/O

VERDICT_COLUMNS = ("reaction_id", "class", "hit_steps", "triggered", "reason", "t_star", "v_end", "plateau",
                   "eta", "kappa", "alpha_min", "kinetic")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(round(x, 12))
    return str(x)


def verdict_row(rid, verdict: TaxonomyVerdict, gate: GateDecision, geo: GeometricDescriptors) -> list[str]:
    return [str(rid), verdict.cls, ";".join(map(str, verdict.hit_steps)), str(int(gate.triggered)), gate.reason,
            str(gate.t_star), _fmt(gate.v_end), str(gate.plateau), _fmt(geo.eta), _fmt(geo.kappa),
            _fmt(geo.alpha_min), _fmt(geo.kinetic)]


def write_verdicts_csv(path, rows: Iterable[list[str]]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for r in rows:
            w.writerow(r)


def write_pca_csv(path, rows: Iterable[tuple]):
    """Rows of (reaction_id, step, pc1, pc2)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reaction_id", "step", "pc1", "pc2"])
        for rid, step, a, b in rows:
            w.writerow([rid, step, _fmt(float(a)), _fmt(float(b))])
