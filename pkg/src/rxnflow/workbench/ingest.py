"""Reaction-SMILES ingestion with a per-reason rejection census."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

from ..chemgraph import (AtomConservationError, ChemError, SmilesSyntaxError, StructureError, UnsupportedFeatureError,
                         ValenceError, canonical_smiles, parse_reaction)
from .synth import Corpus

_REASONS = (
    (UnsupportedFeatureError, "unsupported_feature"),
    (SmilesSyntaxError, "syntax_error"),
    (ValenceError, "valence"),
    (AtomConservationError, "atom_conservation"),
    (StructureError, "structure"),
    (ChemError, "other"),
)


def rejection_reason(exc: Exception) -> str:
    for cls, name in _REASONS:
        if isinstance(exc, cls):
            return name
    return "other"


@dataclass
class IngestResult:
    corpus: Corpus
    census: Counter = field(default_factory=Counter)
    accepted: int = 0
    seen: int = 0


def split_of(key: str, valid_frac: float = 0.1, test_frac: float = 0.1) -> str:
    """Deterministic split from a hash of the canonical reactant, so equal
    reactants always land in the same split."""
    u = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little") / 2.0 ** 64
    if u < test_frac:
        return "test"
    if u < test_frac + valid_frac:
        return "valid"
    return "train"


def ingest_lines(lines, limit: int | None = None, max_atoms: int = 64) -> IngestResult:
    census: Counter = Counter()
    parts = {"train": [], "valid": [], "test": []}
    seen = accepted = 0
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if limit is not None and accepted >= limit:
            break
        seen += 1
        try:
            rec = parse_reaction(line)
        except ChemError as exc:
            census[rejection_reason(exc)] += 1
            continue
        if rec.reactant.n_atoms > max_atoms:
            census["too_many_atoms"] += 1
            continue
        parts[split_of(canonical_smiles(rec.reactant))].append(rec)
        accepted += 1
    meta = {"source": "ingest", "accepted": accepted, "seen": seen, "census": dict(sorted(census.items()))}
    return IngestResult(Corpus(parts["train"], parts["valid"], parts["test"], meta), census, accepted, seen)


def ingest_uspto(path, limit: int | None = None, max_atoms: int = 64) -> IngestResult:
    """Parse a file of mapped reaction-SMILES lines. Lines outside the
    supported subset are skipped and counted by reason. Raises OSError when
    the file cannot be read."""
    with open(path, encoding="utf-8") as fh:
        return ingest_lines(fh, limit, max_atoms)
