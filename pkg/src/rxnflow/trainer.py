"""Training configuration, the optimization loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Adam, RngStreams, Tape, checkpoint
from .autodiff.tensor import NumericError
from .chemgraph import ReactionRecord, graphs_equal
from .encoders import ConditionFeaturizer, FrequencyTable, build_frequency_table
from .flowfield import SIGMA
from .model import ModelConfig, RxnFlowModel, bucketize, make_batch, predict_batch
from .odesolver import DivergenceError, SolverConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    sigma: float = SIGMA
    lambda_flow: float = 1.0
    lambda_prop: float = 1.0
    w_center: float = 10.0
    train_scheme: str = "heun"
    train_steps: int = 5
    infer_scheme: str = "rk4"
    infer_steps: int = 20
    seed: int = 0
    k: int = 128
    d: int = 64
    enc_layers: int = 3
    heads: int = 4
    dec_layers: int = 2
    field_hidden: int = 128
    disable_flow: bool = False
    disable_film: bool = False
    agents_in_input: bool = False
    eval_limit: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("epochs", "batch_size", "train_steps", "infer_steps", "k", "d", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr",):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma", "lambda_flow", "lambda_prop", "w_center", "eval_limit", "enc_layers", "dec_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("train_scheme", "infer_scheme"):
            if getattr(self, name) not in ("euler", "heun", "rk4"):
                raise ConfigError(f"{name} must be euler, heun or rk4")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")

    # ---- model / solver views
    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, enc_layers=self.enc_layers, heads=self.heads, dec_layers=self.dec_layers,
                           field_hidden=self.field_hidden, k=self.k, disable_flow=self.disable_flow,
                           disable_film=self.disable_film, agents_in_input=self.agents_in_input)

    def infer_solver(self, steps: Optional[int] = None) -> SolverConfig:
        return SolverConfig(self.infer_scheme, steps or self.infer_steps)

    # ---- text form
    def to_text(self) -> str:
        lines = [f"version={CONFIG_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        typ = types[key]
        raw = raw.strip()
        try:
            if typ in (bool, "bool"):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if typ in (int, "int"):
                return int(raw)
            if typ in (float, "float"):
                return float(raw)
            return raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None

    @classmethod
    def from_text(cls, text: str, overrides: Optional[dict] = None) -> "TrainConfig":
        values = {}
        version = None
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key == "version":
                version = int(raw)
                continue
            values[key] = cls.parse_value(key, raw)
        if version is not None and version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} unsupported (expected {CONFIG_VERSION})")
        for key, raw in (overrides or {}).items():
            values[key] = cls.parse_value(key, raw) if isinstance(raw, str) else raw
        return cls(**values)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), overrides)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


# --------------------------------------------------------------------- state


@dataclass
class EpochRow:
    epoch: int
    flow_loss: float
    struct_loss: float
    valid_top1: float
    wall_time: float
    skipped: int = 0


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "flow_loss", "struct_loss", "valid_top1", "wall_time", "skipped"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.flow_loss), repr(r.struct_loss), repr(r.valid_top1),
                            f"{r.wall_time:.3f}", r.skipped])

    def losses(self) -> list[tuple[float, float]]:
        return [(r.flow_loss, r.struct_loss) for r in self.rows]


@dataclass
class Trainer:
    model: RxnFlowModel
    cfg: TrainConfig
    table: FrequencyTable
    featurizer: ConditionFeaturizer
    optimizer: Adam

    @classmethod
    def create(cls, cfg: TrainConfig, train: Sequence[ReactionRecord]) -> "Trainer":
        table = build_frequency_table((r.agents for r in train), cfg.k)
        model = RxnFlowModel(cfg.model_config(), seed=cfg.seed)
        return cls(model, cfg, table, ConditionFeaturizer(table, cfg.k), Adam(model.named_parameters(), lr=cfg.lr))

    def batch(self, records):
        return make_batch(records, self.featurizer, self.model.cfg)

    def train_step(self, records: Sequence[ReactionRecord], rngs: RngStreams) -> Optional[dict]:
        """Forward, backward and one Adam update. Returns float losses, or
        None when the batch diverged and was skipped."""
        cfg = self.cfg
        batch = self.batch(records)
        draws = self.model.draw(batch, rngs)
        self.optimizer.zero_grad()
        try:
            with Tape() as tape:
                out = self.model.losses(batch, draws, (cfg.train_scheme, cfg.train_steps), cfg.sigma,
                                        cfg.lambda_flow, cfg.lambda_prop, cfg.w_center)
            if not np.isfinite(out["total"].data):
                raise NumericError("non-finite loss")
            tape.backward(out["total"])
        except (NumericError, DivergenceError, FloatingPointError):
            self.optimizer.state.skipped += 1
            return None
        if not self.optimizer.step():
            return None
        return {k: float(v.data) for k, v in out.items()}

    def epoch_batches(self, records: Sequence[ReactionRecord], rng: np.random.Generator) -> list[list[int]]:
        """Shuffled, size-bucketed index batches."""
        batches = []
        buckets = bucketize(records, self.model.cfg)
        for key in sorted(buckets):
            idx = np.array(buckets[key])
            rng.shuffle(idx)
            for s in range(0, len(idx), self.cfg.batch_size):
                batches.append(idx[s:s + self.cfg.batch_size].tolist())
        order = rng.permutation(len(batches))
        return [batches[i] for i in order]

    def fit(self, train: Sequence[ReactionRecord], valid: Sequence[ReactionRecord] = (),
            epochs: Optional[int] = None, on_epoch_end: Optional[Callable] = None, log: Optional[Callable] = None,
            ) -> TrainReport:
        cfg = self.cfg
        report = TrainReport()
        rngs = RngStreams(cfg.seed)
        eval_set = list(valid)[: cfg.eval_limit] if cfg.eval_limit else list(valid)
        for epoch in range(1, (epochs or cfg.epochs) + 1):
            start = time.perf_counter()
            ep = rngs.fork(f"epoch{epoch}")
            flows, structs = [], []
            skipped0 = self.optimizer.state.skipped
            for idx in self.epoch_batches(train, ep.stream("shuffle")):
                res = self.train_step([train[i] for i in idx], ep)
                if res is not None:
                    flows.append(res.get("flow", 0.0))
                    structs.append(res["struct"])
            top1 = evaluate(self.model, eval_set, self.featurizer, cfg.infer_solver(), k=1, sigma=cfg.sigma,
                            seed=cfg.seed)["top1"] if eval_set else float("nan")
            row = EpochRow(epoch, float(np.mean(flows)) if flows else float("nan"),
                           float(np.mean(structs)) if structs else float("nan"), top1,
                           time.perf_counter() - start, self.optimizer.state.skipped - skipped0)
            report.rows.append(row)
            if log:
                log(row)
            if on_epoch_end:
                on_epoch_end(epoch, self)
        return report

    # ------------------------------------------------------------- persistence
    def state_arrays(self) -> dict:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        st = self.optimizer.state
        for k, v in st.m.items():
            arrays[f"adam_m/{k}"] = v
            arrays[f"adam_v/{k}"] = st.v[k]
        arrays["adam/step"] = np.array([st.step, st.skipped], dtype=np.float32)
        return arrays

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.cfg.save(os.path.join(out_dir, "config.txt"))
        self.table.save(os.path.join(out_dir, "agents.tsv"))
        checkpoint.save(os.path.join(out_dir, "model.lrxf"), self.state_arrays())

    @classmethod
    def load(cls, run_dir) -> "Trainer":
        cfg = TrainConfig.load(os.path.join(run_dir, "config.txt"))
        table = FrequencyTable.load(os.path.join(run_dir, "agents.tsv"))
        model = RxnFlowModel(cfg.model_config(), seed=cfg.seed)
        arrays = checkpoint.load(os.path.join(run_dir, "model.lrxf"))
        load_into(model, arrays)
        opt = Adam(model.named_parameters(), lr=cfg.lr)
        st = opt.state
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                st.m[k[7:]] = v
            elif k.startswith("adam_v/"):
                st.v[k[7:]] = v
        if "adam/step" in arrays:
            st.step, st.skipped = (int(x) for x in arrays["adam/step"])
        return cls(model, cfg, table, ConditionFeaturizer(table, cfg.k), opt)


def load_into(model: RxnFlowModel, arrays: dict):
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(params)


def save_checkpoint(model: RxnFlowModel, path):
    checkpoint.save(path, {f"param/{k}": v for k, v in model.state_dict().items()})


def load_checkpoint(model: RxnFlowModel, path):
    load_into(model, checkpoint.load(path))


# ---------------------------------------------------------------- evaluation


def evaluate(model: RxnFlowModel, records: Sequence[ReactionRecord], featurizer: ConditionFeaturizer,
             solver: SolverConfig = SolverConfig(), k: int = 1, sigma: float = SIGMA, seed: int = 0,
             batch_size: int = 128, final_only: bool = True, keep_predictions: bool = False) -> dict:
    """Top-k accuracy for every k' <= k from one ranked candidate list per
    reaction (so Top-k is monotone in k)."""
    records = list(records)
    hits = np.zeros((len(records), k), dtype=bool)
    preds = [None] * len(records)
    rng = RngStreams(seed).stream("infer")
    buckets = bucketize(records, model.cfg)
    for key in sorted(buckets):
        idx = buckets[key]
        for s in range(0, len(idx), batch_size):
            part = idx[s:s + batch_size]
            batch = make_batch([records[i] for i in part], featurizer, model.cfg)
            for i, p in zip(part, predict_batch(model, batch, solver, k, sigma, rng, final_only=final_only)):
                for rank, c in enumerate(p.candidates[:k]):
                    if graphs_equal(c.graph, records[i].product):
                        hits[i, rank:] = True
                        break
                if keep_predictions:
                    preds[i] = p
    out = {f"top{j}": float(hits[:, :j].any(axis=1).mean()) if len(records) else float("nan")
           for j in range(1, k + 1)}
    out["hits"] = hits
    if keep_predictions:
        out["predictions"] = preds
    return out
