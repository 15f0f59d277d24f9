"""Command-line entry point: ``rxnflow <subcommand> [--flags]``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import diagnostics as dg
from .autodiff import CheckpointError
from .chemgraph import ChemError
from .odesolver import DivergenceError, SolverConfig
from .trainer import ConfigError, TrainConfig, Trainer, evaluate


class CliError(Exception):
    pass


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def emit(obj):
    print(json.dumps(_clean(obj), sort_keys=True, default=_json_default))


def _corpus(data_dir):
    from .workbench.synth import read_corpus
    if not os.path.isdir(data_dir):
        raise CliError(f"data directory not found: {data_dir}")
    return read_corpus(data_dir)


def _split(data_dir, split, limit=None):
    recs = getattr(_corpus(data_dir), split)
    return recs[:limit] if limit else recs


def _trainer(run_dir) -> Trainer:
    if not os.path.exists(os.path.join(run_dir, "model.lrxf")):
        raise CliError(f"no checkpoint in {run_dir}")
    return Trainer.load(run_dir)


def _solver(args, cfg: TrainConfig) -> SolverConfig:
    return SolverConfig(args.scheme or cfg.infer_scheme, args.steps or cfg.infer_steps)


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    from .workbench.synth import generate_corpus, write_corpus
    corpus = generate_corpus(args.n, seed=args.seed, min_atoms=args.min_atoms, max_atoms=args.max_atoms,
                             variant=args.variant, n_valid=args.n_valid, n_test=args.n_test)
    write_corpus(corpus, args.out)
    emit({"out": args.out, "hash": corpus.meta["hash"], "train": len(corpus.train), "valid": len(corpus.valid),
          "test": len(corpus.test)})


def cmd_ingest(args):
    from .workbench.ingest import ingest_uspto
    from .workbench.synth import write_corpus
    res = ingest_uspto(args.input, limit=args.limit, max_atoms=args.max_atoms)
    if args.out:
        write_corpus(res.corpus, args.out)
    emit({"accepted": res.accepted, "seen": res.seen, "census": dict(res.census)})


_TRAIN_FLAGS = ("epochs", "batch_size", "lr", "sigma", "lambda_flow", "lambda_prop", "w_center", "train_scheme",
                "train_steps", "infer_scheme", "infer_steps", "k", "d", "enc_layers", "heads", "dec_layers",
                "field_hidden", "eval_limit", "seed")
_TRAIN_SWITCHES = ("disable_flow", "disable_film", "agents_in_input")


def train_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    overrides.update({k: True for k in _TRAIN_SWITCHES if getattr(args, k, False)})
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = raw
    if args.config:
        return TrainConfig.load(args.config, overrides)
    return TrainConfig.from_text("", overrides)


def cmd_train(args):
    cfg = train_config(args)
    corpus = _corpus(args.data)
    if not corpus.train:
        raise CliError("training split is empty")
    tr = Trainer.create(cfg, corpus.train)
    log = (lambda r: print(f"epoch {r.epoch} flow={r.flow_loss:.6f} struct={r.struct_loss:.6f} "
                           f"valid_top1={r.valid_top1:.4f} time={r.wall_time:.1f}s", file=sys.stderr)) \
        if args.verbose else None
    report = tr.fit(corpus.train, corpus.valid, log=log)
    tr.save(args.out)
    report.write_csv(os.path.join(args.out, "report.csv"))
    last = report.rows[-1]
    emit({"out": args.out, "epochs": len(report.rows), "flow_loss": last.flow_loss, "struct_loss": last.struct_loss,
          "valid_top1": last.valid_top1})


def cmd_eval(args):
    tr = _trainer(args.model)
    recs = _split(args.data, args.split, args.limit)
    res = evaluate(tr.model, recs, tr.featurizer, _solver(args, tr.cfg), k=args.k, sigma=tr.cfg.sigma,
                   seed=args.seed)
    emit({"n": len(recs), **{f"top{j}": res[f"top{j}"] for j in range(1, args.k + 1)}})


def cmd_predict(args):
    from .workbench.pipeline import diagnose, parse_query, prediction_json, trajectories
    tr = _trainer(args.model)
    rec = parse_query(args.rxn)
    has_product = rec.product is not rec.reactant
    (item,) = trajectories(tr.model, [rec], tr.featurizer, _solver(args, tr.cfg), tr.cfg.sigma, args.seed)
    emit(prediction_json(diagnose(item), has_product))


def cmd_diagnose(args):
    from .workbench.pipeline import diagnose, dump_items, trajectories
    tr = _trainer(args.model)
    recs = _split(args.data, args.split, args.limit)
    if not recs:
        raise CliError(f"split {args.split!r} is empty")
    items = trajectories(tr.model, recs, tr.featurizer, _solver(args, tr.cfg), tr.cfg.sigma, args.seed)
    os.makedirs(args.out, exist_ok=True)
    dump_items(os.path.join(args.out, "trajectories.jsonl"), items)
    diags = [diagnose(it) for it in items]
    dg.write_verdicts_csv(os.path.join(args.out, "verdicts.csv"), [d.row() for d in diags])
    proj = dg.pca_project(np.concatenate([it.pooled for it in items]), 2, seed=args.seed)
    coords = np.zeros((len(proj.coords), 2))
    coords[:, :proj.coords.shape[1]] = proj.coords
    pca_rows, k = [], 0
    for it in items:
        for step in range(len(it.pooled)):
            pca_rows.append((it.rid, step, coords[k, 0], coords[k, 1]))
            k += 1
    dg.write_pca_csv(os.path.join(args.out, "pca.csv"), pca_rows)
    counts = {c: sum(d.verdict.cls == c for d in diags) for c in dg.CLASSES}
    emit({"out": args.out, "n": len(diags), "classes": counts,
          "final_top1": float(np.mean([d.final_correct for d in diags])) if diags else None,
          "gated_top1": float(np.mean([d.gated_correct for d in diags])) if diags else None})


def cmd_geometry(args):
    from .workbench.pipeline import descriptor_rows, diagnose, load_items
    items = load_items(os.path.join(args.diag, "trajectories.jsonl"))
    rows = descriptor_rows([diagnose(it) for it in items])
    exclude = [e for e in (args.exclude or "").split(",") if e]
    rep = dg.correlation_report(rows, exclude=exclude)
    emit({"rho": rep.rho, "groups": rep.groups, "excluded": list(rep.excluded)})


def cmd_gate(args):
    from .workbench.pipeline import Thresholds, diagnose, load_items
    th = Thresholds.parse(args.thresholds)
    items = load_items(args.trajectories)
    diags = [diagnose(it, th) for it in items]
    dg.write_verdicts_csv(args.out, [d.row() for d in diags])
    emit({"out": args.out, "n": len(diags), "triggered": sum(d.gate.triggered for d in diags)})


def cmd_bench(args):
    from .workbench.bench import bench_conditioning, bench_steps, ordering_matches
    l_cs = [int(x) for x in args.l_c.split(",")]
    rows = bench_conditioning(args.l_r, l_cs, repeats=args.repeats, seed=args.seed)
    out = {"conditioning": [vars(r) for r in rows], "ordering_matches": ordering_matches(rows)}
    if args.model and args.data:
        tr = _trainer(args.model)
        recs = _split(args.data, "test", args.limit or 20)
        steps = [int(x) for x in args.steps_grid.split(",")]
        lat = bench_steps(tr.model, recs, tr.featurizer, steps, repeats=args.repeats, seed=args.seed)
        out["steps"] = [vars(r) for r in lat]
    emit(out)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rxnflow", description="Latent flow matching for reaction prediction.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    def infer_flags(sp):
        sp.add_argument("--model", required=True, help="run directory written by train")
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--scheme", choices=("euler", "heun", "rk4"), default=None)

    sp = add("gen", cmd_gen, "generate a synthetic corpus")
    sp.add_argument("--n", type=int, default=5000)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=("toy8", "rare64"), default="toy8")
    sp.add_argument("--min-atoms", type=int, default=6)
    sp.add_argument("--max-atoms", type=int, default=14)
    sp.add_argument("--n-valid", type=int, default=None)
    sp.add_argument("--n-test", type=int, default=None)

    sp = add("ingest", cmd_ingest, "parse mapped reaction SMILES lines")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--max-atoms", type=int, default=64)

    sp = add("train", cmd_train, "train a model")
    sp.set_defaults(seed=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--verbose", action="store_true")
    for name in _TRAIN_FLAGS:
        if name == "seed":
            continue
        typ = str if name.endswith("_scheme") else (float if name in ("lr", "sigma", "lambda_flow", "lambda_prop",
                                                                       "w_center") else int)
        sp.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    for name in _TRAIN_SWITCHES:
        sp.add_argument("--" + name.replace("_", "-"), action="store_true")

    sp = add("eval", cmd_eval, "Top-k accuracy on a split")
    infer_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--limit", type=int, default=None)

    sp = add("predict", cmd_predict, "predict one reaction, print JSON")
    infer_flags(sp)
    sp.add_argument("--rxn", required=True, help="reactants>agents>[product]")

    sp = add("diagnose", cmd_diagnose, "trajectories, verdicts and PCA CSVs for a split")
    infer_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("geometry", cmd_geometry, "descriptor/accuracy rank correlations")
    sp.add_argument("--diag", required=True, help="directory written by diagnose")
    sp.add_argument("--exclude", default="", help="comma-separated group labels to leave out")

    sp = add("gate", cmd_gate, "re-run the gate over stored trajectories")
    sp.add_argument("--trajectories", required=True)
    sp.add_argument("--thresholds", default="speed=0.15,plateau=3")
    sp.add_argument("--out", required=True)

    sp = add("bench", cmd_bench, "conditioning cost and step-count latency")
    sp.add_argument("--l-r", type=int, default=16)
    sp.add_argument("--l-c", default="0,8,16,32")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--model", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--steps-grid", default="10,20,50,100")
    return p


_ERRORS = (CliError, ChemError, ConfigError, CheckpointError, DivergenceError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown flags
    try:
        args.fn(args)
    except _ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command},
                         sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
