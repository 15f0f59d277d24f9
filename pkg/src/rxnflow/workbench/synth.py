"""Synthetic condition-selective reactions.

Every scaffold is a small carbon skeleton carrying a few heteroatom leaves
(Cl, Br, N, O, S). A template moves one leaf A from its carbon B onto
another leaf C (break A-B, form A-C). At least two templates match each
scaffold and the agent molecule names the one that fires, so the agent is
the only disambiguator.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import RngStreams
from ..chemgraph import Atom, MolGraph, ReactionRecord, canonical_smiles, parse_reaction, parse_smiles


@dataclass(frozen=True)
class ToyTemplate:
    id: int
    a: str  # moving leaf
    b: str  # atom it leaves
    c: str  # atom it joins


TEMPLATES = (
    ToyTemplate(0, "Cl", "C", "N"), ToyTemplate(1, "Cl", "C", "O"), ToyTemplate(2, "Cl", "C", "S"),
    ToyTemplate(3, "Br", "C", "N"), ToyTemplate(4, "Br", "C", "O"), ToyTemplate(5, "Br", "C", "S"),
    ToyTemplate(6, "N", "C", "S"), ToyTemplate(7, "O", "C", "N"),
)
AGENTS_8 = ("O", "N", "CO", "CCO", "C1CCOC1", "ClCCl", "CC(=O)O", "CN(C)C=O")
SPECIALS = ("Cl", "Br", "N", "O", "S")
_SUFFIXES = ("", "O", "N", "Cl", "C(=O)O", "C#N", "OC", "S")


def rare_agents() -> tuple[str, ...]:
    """64 distinct alkyl-chain agents; agent j selects template j % 8."""
    out = []
    for j in range(64):
        length, suffix = j // 8 + 1, _SUFFIXES[j % 8]
        out.append("C" * length + suffix)
    return tuple(out)


def agent_alphabet(variant: str) -> tuple[str, ...]:
    if variant == "toy8":
        return AGENTS_8
    if variant == "rare64":
        return rare_agents()
    raise ValueError(f"unknown corpus variant {variant!r}")


def agent_template(variant: str, agent_index: int) -> int:
    return agent_index % len(TEMPLATES)


# ----------------------------------------------------------------- scaffolds


def _valence(adj, i):
    return float(np.where(adj[i] == 1.5, 1.0, adj[i]).sum())


def random_scaffold(rng: np.random.Generator, n_atoms: int, specials: Sequence[str]) -> MolGraph:
    """Carbon skeleton of ``n_atoms - len(specials)`` atoms with one leaf per
    special element. Optional benzene core, extra ring bond and C=C."""
    n_c = n_atoms - len(specials)
    elements = ["C"] * n_c
    aromatic = [False] * n_c
    adj = np.zeros((n_atoms, n_atoms))
    start = 0
    if n_c >= 7 and rng.random() < 0.25:
        for i in range(6):
            adj[i, (i + 1) % 6] = adj[(i + 1) % 6, i] = 1.5
            aromatic[i] = True
        start = 6
    else:
        start = 1
    for i in range(start, n_c):
        while True:
            j = int(rng.integers(0, i))
            cap = 3 if aromatic[j] else 4
            deg = int((adj[j] > 0).sum())
            if (aromatic[j] and deg < 3) or (not aromatic[j] and _valence(adj, j) < cap - 1 and deg < 3):
                break
        adj[i, j] = adj[j, i] = 1.0
    sat = [i for i in range(n_c) if not aromatic[i]]
    if len(sat) >= 5 and rng.random() < 0.25:
        for _ in range(20):
            i, j = (int(x) for x in rng.choice(sat, 2, replace=False))
            if adj[i, j] == 0 and _valence(adj, i) <= 2 and _valence(adj, j) <= 2:
                adj[i, j] = adj[j, i] = 1.0
                break
    if rng.random() < 0.3:
        pairs = [(i, j) for i in sat for j in sat if i < j and adj[i, j] == 1.0
                 and _valence(adj, i) <= 2 and _valence(adj, j) <= 2]
        if pairs:
            i, j = pairs[int(rng.integers(len(pairs)))]
            adj[i, j] = adj[j, i] = 2.0
    for k, el in enumerate(specials):
        idx = n_c + k
        hosts = [i for i in range(n_c) if _valence(adj, i) <= (2 if aromatic[i] else 3)
                 and (not aromatic[i] or (adj[i] > 0).sum() < 3)]
        if not hosts:
            raise ValueError("scaffold has no free carbon for another substituent")
        host = hosts[int(rng.integers(len(hosts)))]
        adj[idx, host] = adj[host, idx] = 1.0
        elements.append(el)
        aromatic.append(False)
    atoms = tuple(Atom(e, 0, r) for e, r in zip(elements, aromatic))
    g = MolGraph(atoms, adj)
    g.check_valence()
    return g


def matching_templates(g: MolGraph) -> list[int]:
    els = g.elements
    out = []
    for tpl in TEMPLATES:
        if els.count(tpl.a) == 1 and els.count(tpl.c) == 1:
            a = els.index(tpl.a)
            nb = g.neighbors(a)
            if len(nb) == 1 and els[nb[0]] == tpl.b and g.adj[a, nb[0]] == 1.0:
                out.append(tpl.id)
    return out


def apply_template(g: MolGraph, tpl: ToyTemplate) -> MolGraph:
    els = g.elements
    a, c = els.index(tpl.a), els.index(tpl.c)
    (b,) = g.neighbors(a)
    adj = np.array(g.adj)
    adj[a, b] = adj[b, a] = 0.0
    adj[a, c] = adj[c, a] = 1.0
    p = MolGraph(g.atoms, adj)
    p.check_valence()
    return p


# -------------------------------------------------------------------- corpus


@dataclass
class Corpus:
    train: list
    valid: list
    test: list
    meta: dict

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _sample_specials(rng) -> list[str]:
    while True:
        k = int(rng.integers(2, len(SPECIALS) + 1))
        pick = sorted(rng.choice(len(SPECIALS), k, replace=False))
        sp = [SPECIALS[i] for i in pick]
        if sum(1 for t in TEMPLATES if t.a in sp and t.c in sp) >= 2:
            return sp


def generate_corpus(n: int, seed: int = 0, min_atoms: int = 6, max_atoms: int = 14, variant: str = "toy8",
                    n_valid: int | None = None, n_test: int | None = None, max_tries: int = 100) -> Corpus:
    """``n`` training reactions plus validation/test splits (default n/10
    each) whose reactants never repeat across splits."""
    n_valid = max(1, n // 10) if n_valid is None else n_valid
    n_test = max(1, n // 10) if n_test is None else n_test
    rngs = RngStreams(seed)
    rng = rngs.stream(f"corpus:{variant}")
    alphabet = agent_alphabet(variant)
    agent_graphs = [parse_smiles(s) for s in alphabet]
    by_template = {t.id: [j for j in range(len(alphabet)) if agent_template(variant, j) == t.id] for t in TEMPLATES}
    total = n + n_valid + n_test
    seen: set[str] = set()
    records = []
    attempts = 0
    while len(records) < total:
        attempts += 1
        if attempts > total * max_tries:
            raise RuntimeError("could not generate enough distinct scaffolds")
        specials = _sample_specials(rng)
        size = int(rng.integers(max(min_atoms, len(specials) + 2), max_atoms + 1))
        try:
            g = random_scaffold(rng, size, specials)
        except ValueError:
            continue
        matches = matching_templates(g)
        if len(matches) < 2:
            continue
        key = canonical_smiles(g)
        if key in seen:
            continue
        seen.add(key)
        tid = matches[int(rng.integers(len(matches)))]
        agent = by_template[tid][int(rng.integers(len(by_template[tid])))]
        prod = apply_template(g, TEMPLATES[tid])
        rec = ReactionRecord(g, (agent_graphs[agent],), prod, label=str(tid))
        records.append((rec, len(matches)))
    train = [r for r, _ in records[:n]]
    valid = [r for r, _ in records[n:n + n_valid]]
    test = [r for r, _ in records[n + n_valid:]]
    chance = {name: float(np.mean([1.0 / m for _, m in part])) if part else float("nan")
              for name, part in (("train", records[:n]), ("valid", records[n:n + n_valid]),
                                 ("test", records[n + n_valid:]))}
    meta = {"variant": variant, "seed": seed, "n_train": n, "n_valid": n_valid, "n_test": n_test,
            "chance": chance, "templates": len(TEMPLATES), "agents": list(alphabet)}
    corpus = Corpus(train, valid, test, meta)
    corpus.meta["hash"] = corpus_hash(corpus)
    return corpus


def corpus_lines(records) -> list[str]:
    return [r.to_line() for r in records]


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for name, part in corpus.splits().items():
        h.update(name.encode())
        for line in corpus_lines(part):
            h.update(line.encode("utf-8"))
            h.update(b"\n")
    return h.hexdigest()


def write_corpus(corpus: Corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name, part in corpus.splits().items():
        with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
            for line in corpus_lines(part):
                fh.write(line + "\n")
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(corpus.meta, fh, indent=2, sort_keys=True)


def read_split(path) -> list[ReactionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(parse_reaction(line))
    return out


def read_corpus(data_dir) -> Corpus:
    parts = {}
    for name in ("train", "valid", "test"):
        path = os.path.join(data_dir, f"{name}.txt")
        parts[name] = read_split(path) if os.path.exists(path) else []
    meta_path = os.path.join(data_dir, "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return Corpus(parts["train"], parts["valid"], parts["test"], meta)
