"""Inference and diagnosis over reactions: decoded trajectories, taxonomy
verdicts, gate decisions, geometry, and their on-disk forms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import diagnostics as dg
from ..autodiff import RngStreams
from ..chemgraph import (ChemError, MolGraph, ReactionRecord, SmilesSyntaxError, graph_from_json,
                         graph_to_json, graphs_equal, molecules, parse_reaction, parse_smiles, to_smiles)
from ..flowfield import SIGMA
from ..model import RxnFlowModel, bucketize, make_batch, predict_batch
from ..odesolver import SolverConfig


def parse_query(line: str) -> ReactionRecord:
    """A full mapped reaction line, or ``reactants>agents>`` without a product.
    In the latter case the product slot holds the reactant."""
    text = line.strip().split(None, 1)[0] if line.strip() else ""
    fields = text.split(">")
    if len(fields) == 3 and not fields[2]:
        if not fields[0]:
            raise SmilesSyntaxError("missing reactants", 0)
        reactant = parse_smiles(fields[0])
        agents = molecules(parse_smiles(fields[1]).strip_maps()) if fields[1] else []
        return ReactionRecord(reactant, tuple(agents), reactant, source=text)
    return parse_reaction(line)


@dataclass
class Thresholds:
    speed: float = dg.TAU_SPEED
    plateau: int = dg.TAU_PLATEAU
    sim: float = dg.SIM_THRESHOLD
    lam: float = dg.LAMBDA

    @classmethod
    def parse(cls, text: str) -> "Thresholds":
        """``speed=0.15,plateau=3[,sim=0.995][,lambda=1]``."""
        out = cls()
        if not text:
            return out
        for item in text.split(","):
            if "=" not in item:
                raise ValueError(f"bad threshold item {item!r}")
            key, raw = (s.strip() for s in item.split("=", 1))
            if key == "speed":
                out.speed = float(raw)
            elif key == "plateau":
                out.plateau = int(raw)
            elif key == "sim":
                out.sim = float(raw)
            elif key in ("lambda", "lam"):
                out.lam = float(raw)
            else:
                raise ValueError(f"unknown threshold {key!r}")
        return out


@dataclass
class TrajectoryItem:
    rid: str
    record: ReactionRecord
    graphs: list
    pooled: np.ndarray


@dataclass
class Diagnosis:
    item: TrajectoryItem
    verdict: dg.TaxonomyVerdict
    gate: dg.GateDecision
    chosen: MolGraph
    geo: dg.GeometricDescriptors

    @property
    def final_correct(self) -> bool:
        return graphs_equal(self.item.graphs[-1], self.item.record.product)

    @property
    def gated_correct(self) -> bool:
        return graphs_equal(self.chosen, self.item.record.product)

    def row(self) -> list[str]:
        return dg.verdict_row(self.item.rid, self.verdict, self.gate, self.geo)


def trajectories(model: RxnFlowModel, records: Sequence[ReactionRecord], featurizer,
                 solver: SolverConfig = SolverConfig(), sigma: float = SIGMA, seed: int = 0, batch_size: int = 128,
                 ids: Optional[Sequence[str]] = None) -> list[TrajectoryItem]:
    """One noisy draw per reaction, decoded at every recorded point."""
    records = list(records)
    ids = [str(i) for i in range(len(records))] if ids is None else list(ids)
    out: list = [None] * len(records)
    rng = RngStreams(seed).stream("infer")
    buckets = bucketize(records, model.cfg)
    for key in sorted(buckets):
        idx = buckets[key]
        for s in range(0, len(idx), batch_size):
            part = idx[s:s + batch_size]
            batch = make_batch([records[i] for i in part], featurizer, model.cfg)
            for i, p in zip(part, predict_batch(model, batch, solver, 1, sigma, rng)):
                out[i] = TrajectoryItem(ids[i], records[i], p.trajectory, np.asarray(p.pooled, dtype=np.float64))
    return out


def diagnose(item: TrajectoryItem, th: Thresholds = Thresholds()) -> Diagnosis:
    rec = item.record
    verdict = dg.classify_trajectory(item.graphs, rec.product, rec.reactant)
    gate, chosen = dg.tagi(item.pooled, item.graphs, rec.reactant, th.speed, th.plateau, th.sim, th.lam)
    return Diagnosis(item, verdict, gate, chosen, dg.geometry(item.pooled))


def descriptor_rows(diags: Sequence[Diagnosis]) -> list[dict]:
    """Per-reaction dicts for correlation_report, grouped by record label."""
    rows = []
    for d in diags:
        rows.append({"group": d.item.record.label, "correct": d.final_correct, "eta": d.geo.eta,
                     "kappa": d.geo.kappa, "alpha_min": d.geo.alpha_min, "kinetic": d.geo.kinetic})
    return rows


def prediction_json(d: Diagnosis, has_product: bool = True) -> dict:
    def num(x):
        return None if isinstance(x, float) and math.isnan(x) else x
    out = {
        "product": to_smiles(d.chosen, canonical=True),
        "final_product": to_smiles(d.item.graphs[-1], canonical=True),
        "valid": dg.is_valid(d.chosen),
        "gate": {"triggered": d.gate.triggered, "reason": d.gate.reason, "t_star": d.gate.t_star,
                 "v_end": d.gate.v_end, "plateau": d.gate.plateau},
        "descriptors": {"eta": num(d.geo.eta), "kappa": num(d.geo.kappa), "alpha_min": num(d.geo.alpha_min),
                        "kinetic": num(d.geo.kinetic)},
    }
    if has_product:
        out["class"] = d.verdict.cls
        out["correct"] = d.gated_correct
    return out


# ------------------------------------------------------------------- storage


def dump_items(path, items: Sequence[TrajectoryItem]):
    """JSON lines; floats are written with full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            rec = it.record
            obj = {"id": it.rid, "reactant": graph_to_json(rec.reactant), "product": graph_to_json(rec.product),
                   "label": rec.label, "graphs": [graph_to_json(g) for g in it.graphs],
                   "pooled": [[float(x) for x in row] for row in it.pooled]}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_items(path) -> list[TrajectoryItem]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                r, p = graph_from_json(obj["reactant"]), graph_from_json(obj["product"])
                rec = ReactionRecord(r, (), p, label=obj.get("label"))
                graphs = [graph_from_json(g) for g in obj["graphs"]]
                out.append(TrajectoryItem(str(obj["id"]), rec, graphs, np.asarray(obj["pooled"], dtype=np.float64)))
            except (KeyError, TypeError, ValueError, ChemError) as exc:
                raise ValueError(f"{path}:{n}: bad trajectory record ({exc})") from None
    return out

