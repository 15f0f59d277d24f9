"""Molecular graphs, a reaction-SMILES subset, role separation and fingerprints.

Graphs carry a dense symmetric bond-order matrix with orders in
{0, 1, 1.5, 2, 3}; 1.5 marks an aromatic bond. Hydrogens are implicit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels

BOND_ORDERS = (0.0, 1.0, 1.5, 2.0, 3.0)
ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
AROMATIC_BRACKET = {**AROMATIC_ORGANIC, "se": "Se", "as": "As"}
AROMATIC_CAPABLE = set(AROMATIC_BRACKET.values())
ELEMENTS = {
    "B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "Li", "Na", "K", "Rb", "Cs", "Be", "Mg",
    "Ca", "Sr", "Ba", "Al", "Ga", "In", "Tl", "Si", "Ge", "Sn", "Pb", "As", "Sb", "Bi", "Se",
    "Te", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Zr", "Mo", "Ru", "Rh", "Pd",
    "Ag", "Cd", "W", "Os", "Ir", "Pt", "Au", "Hg", "Ce", "Sc", "Y", "La", "Nd", "Yb", "Xe",
}
MAX_VALENCE = {"C": 4, "N": 3, "O": 2, "S": 6, "P": 5, "F": 1, "Cl": 1, "Br": 1, "I": 1, "B": 3}
# allowed valences used only to infer implicit hydrogens when writing
DEFAULT_VALENCES = {"C": (4,), "N": (3, 5), "O": (2,), "S": (2, 4, 6), "P": (3, 5), "F": (1,), "Cl": (1,),
                    "Br": (1,), "I": (1,), "B": (3,)}
FP_WIDTH = 512


class ChemError(ValueError):
    pass


class SmilesSyntaxError(ChemError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnsupportedFeatureError(ChemError):
    def __init__(self, feature: str, offset: int):
        super().__init__(f"unsupported SMILES feature: {feature} at offset {offset}")
        self.feature = feature
        self.offset = offset


class ValenceError(ChemError):
    def __init__(self, index: int, element: str, valence: float, limit: int):
        super().__init__(f"atom {index} ({element}) has valence {valence:g} > {limit}")
        self.index = index
        self.element = element


class StructureError(ChemError):
    pass


class AtomConservationError(ChemError):
    pass


class SerializationError(ChemError):
    pass


def max_valence(element: str, charge: int) -> Optional[int]:
    v = MAX_VALENCE.get(element)
    if v is None:
        return None
    if charge == 1 and element in ("N", "O"):
        return v + 1
    return v


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    amap: int = 0
    hcount: Optional[int] = None  # None = implicit


@dataclass(frozen=True, eq=False)
class MolGraph:
    atoms: tuple
    adj: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        adj = np.array(self.adj, dtype=np.float64, copy=True)
        n = len(atoms)
        if adj.shape != (n, n):
            raise StructureError(f"adjacency shape {adj.shape} does not match {n} atoms")
        if n and (np.any(np.diag(adj) != 0) or np.any(adj != adj.T)):
            raise StructureError("adjacency must be symmetric with zero diagonal")
        if not np.all(np.isin(adj, BOND_ORDERS)):
            raise StructureError("bond orders must lie in {0, 1, 1.5, 2, 3}")
        for a in atoms:
            if not -6 <= a.charge <= 6:
                raise StructureError(f"formal charge {a.charge} outside [-6, 6]")
        maps = [a.amap for a in atoms if a.amap]
        if len(maps) != len(set(maps)):
            raise StructureError("duplicate nonzero atom-map indices")
        adj.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "adj", adj)

    # -- accessors
    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def __len__(self):
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def charges(self) -> np.ndarray:
        return np.array([a.charge for a in self.atoms], dtype=np.int64)

    @property
    def aromatic(self) -> np.ndarray:
        return np.array([a.aromatic for a in self.atoms], dtype=bool)

    @property
    def maps(self) -> np.ndarray:
        return np.array([a.amap for a in self.atoms], dtype=np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        return np.nonzero(self.adj[i])[0]

    def degree(self) -> np.ndarray:
        return (self.adj > 0).sum(axis=1)

    def bonds(self):
        iu, ju = np.nonzero(np.triu(self.adj))
        return [(int(i), int(j), float(self.adj[i, j])) for i, j in zip(iu, ju)]

    # -- derived graphs
    def permute(self, order: Sequence[int]) -> "MolGraph":
        """New graph whose atom k is this graph's atom ``order[k]``."""
        order = np.asarray(order, dtype=np.intp)
        return MolGraph(tuple(self.atoms[i] for i in order), self.adj[np.ix_(order, order)])

    def subgraph(self, idx: Sequence[int]) -> "MolGraph":
        return self.permute(idx)

    def with_atoms(self, atoms) -> "MolGraph":
        return MolGraph(tuple(atoms), self.adj)

    def strip_maps(self) -> "MolGraph":
        return self.with_atoms(Atom(a.element, a.charge, a.aromatic, 0, a.hcount) for a in self.atoms)

    def components(self) -> list[list[int]]:
        n = self.n_atoms
        seen = [False] * n
        comps = []
        nbrs = [self.neighbors(i) for i in range(n)]
        for s in range(n):
            if seen[s]:
                continue
            stack, comp = [s], []
            seen[s] = True
            while stack:
                a = stack.pop()
                comp.append(a)
                for b in nbrs[a]:
                    if not seen[b]:
                        seen[b] = True
                        stack.append(int(b))
            comps.append(sorted(comp))
        return comps

    # -- chemistry
    def valence_lower_bounds(self) -> np.ndarray:
        """Smallest Kekule-consistent valence per atom: aromatic bonds count 1."""
        adj = self.adj
        contrib = np.where(adj == 1.5, 1.0, adj).sum(axis=1)
        h = np.array([a.hcount or 0 for a in self.atoms], dtype=np.float64)
        return contrib + h

    def valence_errors(self) -> list[tuple[int, str, float, int]]:
        errs = []
        vals = self.valence_lower_bounds()
        for i, a in enumerate(self.atoms):
            lim = max_valence(a.element, a.charge)
            if lim is not None and vals[i] > lim:
                errs.append((i, a.element, float(vals[i]), lim))
        return errs

    def is_valence_valid(self) -> bool:
        return not self.valence_errors()

    def check_valence(self):
        errs = self.valence_errors()
        if errs:
            raise ValenceError(*errs[0])


def combine(graphs: Sequence[MolGraph]) -> MolGraph:
    """Disjoint union (block-diagonal adjacency), atoms in argument order."""
    atoms = [a for g in graphs for a in g.atoms]
    n = len(atoms)
    adj = np.zeros((n, n))
    off = 0
    for g in graphs:
        k = g.n_atoms
        adj[off:off + k, off:off + k] = g.adj
        off += k
    return MolGraph(tuple(atoms), adj)


def graphs_equal(a: MolGraph, b: MolGraph) -> bool:
    """Entrywise equality on a shared atom indexing."""
    if a.n_atoms != b.n_atoms:
        raise StructureError(f"cannot compare graphs with {a.n_atoms} and {b.n_atoms} atoms")
    if not np.array_equal(a.adj, b.adj):
        return False
    for x, y in zip(a.atoms, b.atoms):
        if x.charge != y.charge or x.aromatic != y.aromatic:
            return False
    return True


# ====================================================================== parser


def _read_int(text, pos):
    start = pos
    while pos < len(text) and text[pos].isdigit():
        pos += 1
    return (int(text[start:pos]) if pos > start else None), pos


def _parse_bracket(text: str, pos: int):
    """Parse ``[...]`` starting at ``pos`` (pointing at '['). Returns (Atom, new_pos)."""
    start = pos
    pos += 1
    if pos < len(text) and text[pos].isdigit():
        raise UnsupportedFeatureError("isotope", pos)
    aromatic = False
    sym = None
    for cand in sorted(AROMATIC_BRACKET, key=len, reverse=True):
        if text.startswith(cand, pos):
            sym, aromatic = AROMATIC_BRACKET[cand], True
            pos += len(cand)
            break
    if sym is None:
        if pos >= len(text) or not text[pos].isupper():
            raise SmilesSyntaxError("expected element symbol in bracket atom", pos)
        two = text[pos:pos + 2]
        if len(two) == 2 and two[1].islower() and two in ELEMENTS:
            sym = two
            pos += 2
        elif text[pos] in ELEMENTS:
            sym = text[pos]
            pos += 1
        elif text[pos] == "H":
            raise UnsupportedFeatureError("explicit hydrogen atom", pos)
        else:
            raise SmilesSyntaxError(f"unknown element {two!r}", pos)
    if pos < len(text) and text[pos] == "@":
        raise UnsupportedFeatureError("stereo mark", pos)
    hcount = 0
    if pos < len(text) and text[pos] == "H":
        pos += 1
        n, pos = _read_int(text, pos)
        hcount = 1 if n is None else n
    charge = 0
    if pos < len(text) and text[pos] in "+-":
        sign = 1 if text[pos] == "+" else -1
        ch = text[pos]
        pos += 1
        n, pos = _read_int(text, pos)
        if n is not None:
            charge = sign * n
        else:
            charge = sign
            while pos < len(text) and text[pos] == ch:
                charge += sign
                pos += 1
    amap = 0
    if pos < len(text) and text[pos] == ":":
        pos += 1
        n, pos = _read_int(text, pos)
        if n is None:
            raise SmilesSyntaxError("expected atom-map number", pos)
        amap = n
    if pos >= len(text) or text[pos] != "]":
        raise SmilesSyntaxError("unterminated bracket atom", start)
    if not -6 <= charge <= 6:
        raise SmilesSyntaxError(f"charge {charge} outside [-6, 6]", start)
    return Atom(sym, charge, aromatic, amap, hcount), pos + 1


_BOND_SYMBOLS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}


def parse_smiles(text: str, check_valence: bool = True) -> MolGraph:
    """Parse the supported SMILES subset into a :class:`MolGraph`.

    Accepts organic-subset and bracket atoms (charge, H count, atom map),
    bonds ``- = # :``, branches, ring closures (``1``..``9``, ``%nn``) and
    dot-separated components. Stereo marks and isotopes raise
    :class:`UnsupportedFeatureError`.
    """
    atoms: list[Atom] = []
    bonds: dict[tuple[int, int], float] = {}
    stack: list[Optional[int]] = []
    prev: Optional[int] = None
    pending: Optional[tuple[str, int]] = None
    rings: dict[int, tuple[int, Optional[str], int]] = {}
    pos = 0
    n = len(text)

    def add_bond(i, j, sym, at):
        if i == j:
            raise SmilesSyntaxError("bond from an atom to itself", at)
        key = (min(i, j), max(i, j))
        if key in bonds:
            raise SmilesSyntaxError("duplicate bond", at)
        if sym is None:
            order = 1.5 if atoms[i].aromatic and atoms[j].aromatic else 1.0
        else:
            order = _BOND_SYMBOLS[sym]
        bonds[key] = order

    while pos < n:
        ch = text[pos]
        if ch in " \t\r\n":
            raise SmilesSyntaxError("whitespace inside SMILES", pos)
        if ch == "[" or ch.isalpha():
            if ch == "[":
                atom, new_pos = _parse_bracket(text, pos)
            else:
                atom = None
                for sym in ORGANIC:
                    if text.startswith(sym, pos):
                        atom, new_pos = Atom(sym), pos + len(sym)
                        break
                if atom is None and ch in AROMATIC_ORGANIC:
                    atom, new_pos = Atom(AROMATIC_ORGANIC[ch], aromatic=True), pos + 1
                if atom is None:
                    raise SmilesSyntaxError(f"unexpected character {ch!r}", pos)
            idx = len(atoms)
            atoms.append(atom)
            if prev is not None:
                add_bond(prev, idx, pending[0] if pending else None, pos)
            elif pending is not None:
                raise SmilesSyntaxError("bond symbol without a preceding atom", pending[1])
            pending = None
            prev = idx
            pos = new_pos
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", pos)
            pending = (ch, pos)
            pos += 1
        elif ch in "/\\":
            raise UnsupportedFeatureError("stereo mark", pos)
        elif ch in "$*@":
            raise UnsupportedFeatureError({"$": "quadruple bond", "*": "wildcard atom", "@": "stereo mark"}[ch], pos)
        elif ch == "(":
            if prev is None:
                raise SmilesSyntaxError("branch without a preceding atom", pos)
            stack.append(prev)
            pos += 1
        elif ch == ")":
            if not stack:
                raise SmilesSyntaxError("unbalanced ')'", pos)
            if pending is not None:
                raise SmilesSyntaxError("dangling bond symbol", pending[1])
            prev = stack.pop()
            pos += 1
        elif ch.isdigit() or ch == "%":
            at = pos
            if ch == "%":
                digits = text[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError("'%' must be followed by two digits", pos)
                num = int(digits)
                pos += 3
            else:
                num = int(ch)
                pos += 1
            if prev is None:
                raise SmilesSyntaxError("ring closure without a preceding atom", at)
            sym = pending[0] if pending else None
            pending = None
            if num in rings:
                other, osym, _ = rings.pop(num)
                if sym is not None and osym is not None and sym != osym:
                    raise SmilesSyntaxError("conflicting ring-closure bond symbols", at)
                add_bond(other, prev, sym or osym, at)
            else:
                rings[num] = (prev, sym, at)
        elif ch == ".":
            if stack:
                raise SmilesSyntaxError("'.' inside a branch", pos)
            if pending is not None:
                raise SmilesSyntaxError("dangling bond symbol", pending[1])
            if prev is None:
                raise SmilesSyntaxError("empty component", pos)
            prev = None
            pos += 1
        elif ch == ">":
            raise SmilesSyntaxError("reaction arrow inside a molecule SMILES", pos)
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r}", pos)
    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol", pending[1])
    if text.endswith("."):
        raise SmilesSyntaxError("empty component", len(text) - 1)
    if stack:
        raise SmilesSyntaxError("unbalanced '('", n)
    if rings:
        num, (_, _, at) = next(iter(rings.items()))
        raise SmilesSyntaxError(f"unclosed ring {num}", at)
    if not atoms:
        raise SmilesSyntaxError("empty SMILES", 0)
    adj = np.zeros((len(atoms), len(atoms)))
    for (i, j), o in bonds.items():
        adj[i, j] = adj[j, i] = o
    g = MolGraph(tuple(atoms), adj)
    if check_valence:
        g.check_valence()
    return g


# ====================================================================== writer


def implicit_hydrogens(g: MolGraph, i: int) -> int:
    a = g.atoms[i]
    if a.hcount is not None:
        return a.hcount
    allowed = DEFAULT_VALENCES.get(a.element)
    if allowed is None:
        return 0
    if a.charge == 1 and a.element in ("N", "O"):
        allowed = tuple(v + 1 for v in allowed)
    row = g.adj[i]
    used = float(row.sum())
    if a.aromatic:
        used = float(np.where(row == 1.5, 1.0, row).sum()) + 1.0
    used = int(np.ceil(used - 1e-9))
    for v in allowed:
        if v >= used:
            return v - used
    return 0


def _atom_token(g: MolGraph, i: int, write_maps: bool) -> str:
    a = g.atoms[i]
    if a.aromatic and a.element not in AROMATIC_CAPABLE:
        raise SerializationError(f"atom {i} ({a.element}) cannot be written as aromatic")
    sym = a.element.lower() if a.aromatic else a.element
    amap = a.amap if write_maps else 0
    if a.charge == 0 and amap == 0 and a.hcount is None and a.element in ORGANIC and (
            not a.aromatic or sym in AROMATIC_ORGANIC):
        return sym
    h = implicit_hydrogens(g, i)
    parts = ["[", sym]
    if h:
        parts.append("H" if h == 1 else f"H{h}")
    if a.charge:
        sign = "+" if a.charge > 0 else "-"
        parts.append(sign if abs(a.charge) == 1 else f"{sign}{abs(a.charge)}")
    if amap:
        parts.append(f":{amap}")
    parts.append("]")
    return "".join(parts)


def _bond_token(g: MolGraph, i: int, j: int) -> str:
    o = g.adj[i, j]
    both_arom = g.atoms[i].aromatic and g.atoms[j].aromatic
    if o == 1.0:
        return "-" if both_arom else ""
    if o == 1.5:
        return "" if both_arom else ":"
    if o == 2.0:
        return "="
    if o == 3.0:
        return "#"
    raise SerializationError(f"bond order {o} between atoms {i} and {j}")


def _ring_label(k: int) -> str:
    return str(k) if k < 10 else f"%{k:02d}"


def _write_component(g: MolGraph, comp: list[int], rank, write_maps: bool, order_out: list) -> str:
    nbrs = {a: sorted((int(b) for b in g.neighbors(a)), key=lambda b: rank[b]) for a in comp}
    root = min(comp, key=lambda a: rank[a])
    children: dict[int, list[int]] = {a: [] for a in comp}
    ring_open: dict[int, list[int]] = {a: [] for a in comp}
    ring_close: dict[int, list[int]] = {a: [] for a in comp}
    visit_pos: dict[int, int] = {}
    seen_edges = set()
    # iterative DFS (pass 1): spanning tree and ring-closure edges
    stack = [(root, -1, iter(nbrs[root]))]
    visit_pos[root] = 0
    while stack:
        a, parent, it = stack[-1]
        advanced = False
        for b in it:
            if b == parent or frozenset((a, b)) in seen_edges:
                continue
            seen_edges.add(frozenset((a, b)))
            if b in visit_pos:
                ring_open[b].append(a)
                ring_close[a].append(b)
            else:
                visit_pos[b] = len(visit_pos)
                children[a].append(b)
                stack.append((b, a, iter(nbrs[b])))
                advanced = True
                break
        if not advanced:
            stack.pop()
    # pass 2: emit
    out: list[str] = []
    free: list[int] = []
    next_label = [1]
    active: dict[frozenset, int] = {}

    def take_label():
        if free:
            free.sort()
            return free.pop(0)
        k = next_label[0]
        next_label[0] += 1
        return k

    def emit(a, parent):
        if parent >= 0:
            out.append(_bond_token(g, parent, a))
        out.append(_atom_token(g, a, write_maps))
        order_out.append(a)
        for b in sorted(ring_close[a], key=lambda x: visit_pos[x]):
            k = active.pop(frozenset((a, b)))
            out.append(_bond_token(g, a, b) + _ring_label(k))
            free.append(k)
        for b in sorted(ring_open[a], key=lambda x: visit_pos[x]):
            k = take_label()
            active[frozenset((a, b))] = k
            out.append(_ring_label(k))
        kids = children[a]
        for idx, c in enumerate(kids):
            if idx < len(kids) - 1:
                out.append("(")
                emit(c, a)
                out.append(")")
            else:
                emit(c, a)

    emit(root, -1)
    return "".join(out)


def write_smiles(g: MolGraph, canonical: bool = False, write_maps: bool = True):
    """Serialize ``g``; returns ``(smiles, order)`` where ``order[k]`` is the
    graph index of the k-th atom written."""
    if canonical:
        rank = canonical_ranks(g)
    else:
        rank = list(range(g.n_atoms))
    comps = g.components()
    pieces = []
    for comp in comps:
        order: list[int] = []
        s = _write_component(g, comp, rank, write_maps, order)
        pieces.append((s, order))
    if canonical:
        pieces.sort(key=lambda p: p[0])
    else:
        pieces.sort(key=lambda p: min(p[1]))
    smiles = ".".join(p[0] for p in pieces)
    order = [i for p in pieces for i in p[1]]
    return smiles, order


def to_smiles(g: MolGraph, canonical: bool = False, write_maps: bool = True) -> str:
    return write_smiles(g, canonical, write_maps)[0]


def canonical_smiles(g: MolGraph) -> str:
    """Order-independent string for a map-free molecule."""
    return write_smiles(g, canonical=True, write_maps=False)[0]


def _relabel(keys) -> list[int]:
    uniq = sorted(set(keys))
    lookup = {k: r for r, k in enumerate(uniq)}
    return [lookup[k] for k in keys]


def canonical_ranks(g: MolGraph) -> list[int]:
    """Distinct atom ranks from iterative neighborhood refinement with
    deterministic tie breaking."""
    n = g.n_atoms
    deg = g.degree()
    nbrs = [[(float(g.adj[i, j]), int(j)) for j in g.neighbors(i)] for i in range(n)]
    inv = []
    for i, a in enumerate(g.atoms):
        inv.append((a.element, a.charge, a.aromatic, int(deg[i]), implicit_hydrogens(g, i),
                    tuple(sorted(o for o, _ in nbrs[i]))))
    ranks = _relabel(inv)

    def refine(r):
        while True:
            keys = [(r[i], tuple(sorted((o, r[j]) for o, j in nbrs[i]))) for i in range(n)]
            new = _relabel(keys)
            if len(set(new)) == len(set(r)):
                return new
            r = new

    ranks = refine(ranks)
    while len(set(ranks)) < n:
        counts: dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = min(r for r, c in counts.items() if c > 1)
        pick = min(i for i in range(n) if ranks[i] == tied)
        ranks = [2 * r for r in ranks]
        ranks[pick] -= 1
        ranks = refine(_relabel(ranks))
    return ranks


# ================================================================= JSON lines


def graph_to_json(g: MolGraph) -> dict:
    d = {
        "atoms": g.elements,
        "bonds": [[i, j, o] for i, j, o in g.bonds()],
        "charge": [int(a.charge) for a in g.atoms],
        "aromatic": [bool(a.aromatic) for a in g.atoms],
    }
    if any(a.amap for a in g.atoms):
        d["maps"] = [int(a.amap) for a in g.atoms]
    return d


def graph_from_json(d: dict) -> MolGraph:
    try:
        elements = list(d["atoms"])
        n = len(elements)
        charges = d.get("charge", [0] * n)
        arom = d.get("aromatic", [False] * n)
        maps = d.get("maps", [0] * n)
        if not len(charges) == len(arom) == len(maps) == n:
            raise SerializationError("per-atom arrays differ in length")
        for e in elements:
            if e not in ELEMENTS:
                raise SerializationError(f"unknown element {e!r}")
        atoms = tuple(Atom(e, int(c), bool(r), int(m)) for e, c, r, m in zip(elements, charges, arom, maps))
        adj = np.zeros((n, n))
        for i, j, o in d.get("bonds", []):
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise SerializationError(f"bond ({i}, {j}) out of range for {n} atoms")
            adj[i, j] = adj[j, i] = float(o)
        return MolGraph(atoms, adj)
    except SerializationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"bad graph record: {exc}") from None


def dumps_graph(g: MolGraph) -> str:
    return json.dumps(graph_to_json(g), separators=(",", ":"))


# ================================================================== reactions


@dataclass(frozen=True, eq=False)
class ReactionRecord:
    reactant: MolGraph
    agents: tuple
    product: MolGraph
    source: str = ""
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.reactant.n_atoms != self.product.n_atoms:
            raise AtomConservationError(
                f"reactant has {self.reactant.n_atoms} atoms, product {self.product.n_atoms}")

    def bond_delta(self) -> np.ndarray:
        return self.product.adj - self.reactant.adj

    def to_line(self) -> str:
        """Mapped reaction SMILES; atom maps are ``index + 1``."""
        maps = range(1, self.reactant.n_atoms + 1)
        r = self.reactant.with_atoms(Atom(a.element, a.charge, a.aromatic, m, None)
                                     for a, m in zip(self.reactant.atoms, maps))
        p = self.product.with_atoms(Atom(a.element, a.charge, a.aromatic, m, None)
                                    for a, m in zip(self.product.atoms, maps))
        agents = ".".join(canonical_smiles(a) for a in self.agents)
        line = f"{to_smiles(r)}>{agents}>{to_smiles(p)}"
        return line if self.label is None else f"{line} {self.label}"


def molecules(g: MolGraph) -> list[MolGraph]:
    return [g.subgraph(c) for c in g.components()]


def split_roles(src: Sequence[MolGraph], tgt: MolGraph):
    """Separate source molecules into one reactant graph and agent molecules.

    A molecule is a reactant if any of its atom maps occurs in ``tgt``.
    Reactant atoms are re-indexed contiguously: mapped atoms by ascending
    map index, then unmapped atoms in source order. Agents lose their maps.
    """
    tgt_maps = {int(m) for m in tgt.maps if m}
    if not tgt_maps:
        raise AtomConservationError("product carries no atom maps")
    reactants, agents = [], []
    for m in src:
        if any(int(x) in tgt_maps for x in m.maps if x):
            reactants.append(m)
        else:
            agents.append(m.strip_maps())
    if not reactants:
        raise AtomConservationError("no source molecule shares atom maps with the product")
    merged = combine(reactants)
    src_maps = {int(x) for x in merged.maps if x}
    missing = sorted(tgt_maps - src_maps)
    if missing:
        raise AtomConservationError(f"product atom maps {missing[:5]} have no source counterpart")
    mapped = sorted((int(a.amap), i) for i, a in enumerate(merged.atoms) if a.amap)
    unmapped = [i for i, a in enumerate(merged.atoms) if not a.amap]
    order = [i for _, i in mapped] + unmapped
    return merged.permute(order), agents


def align_product(reactant: MolGraph, tgt: MolGraph) -> MolGraph:
    """Express ``tgt`` on the reactant's atom indexing.

    Reactant atoms absent from the product (leaving groups) keep their
    mutual bonds and labels, and lose bonds to atoms that are present.
    """
    index = {int(a.amap): i for i, a in enumerate(reactant.atoms) if a.amap}
    n = reactant.n_atoms
    place = np.full(tgt.n_atoms, -1, dtype=np.intp)
    for k, a in enumerate(tgt.atoms):
        if not a.amap:
            raise AtomConservationError(f"product atom {k} ({a.element}) has no atom map")
        i = index.get(int(a.amap))
        if i is None:
            raise AtomConservationError(f"product atom map {a.amap} has no reactant counterpart")
        if reactant.atoms[i].element != a.element:
            raise AtomConservationError(
                f"atom map {a.amap} changes element {reactant.atoms[i].element} -> {a.element}")
        place[k] = i
    present = np.zeros(n, dtype=bool)
    present[place] = True
    adj = np.where(np.outer(~present, ~present), reactant.adj, 0.0)
    adj[np.ix_(place, place)] = tgt.adj
    atoms = list(reactant.atoms)
    for k, a in enumerate(tgt.atoms):
        i = place[k]
        atoms[i] = Atom(a.element, a.charge, a.aromatic, reactant.atoms[i].amap, None)
    return MolGraph(tuple(atoms), adj)


def parse_reaction(line: str, check_valence: bool = True) -> ReactionRecord:
    """Parse ``reactants>agents>products [label]`` with atom maps."""
    text = line.strip()
    parts = text.split(None, 1)
    if not parts:
        raise SmilesSyntaxError("empty reaction line", 0)
    rxn = parts[0]
    label = parts[1].strip() if len(parts) > 1 else None
    fields = rxn.split(">")
    if len(fields) != 3:
        raise SmilesSyntaxError("reaction must have the form reactants>agents>products", 0)
    lhs, mid, rhs = fields
    src: list[MolGraph] = []
    offset = 0
    for chunk in (lhs, mid):
        if chunk:
            try:
                src.extend(molecules(parse_smiles(chunk, check_valence)))
            except SmilesSyntaxError as exc:
                raise SmilesSyntaxError(str(exc).rsplit(" at offset", 1)[0], exc.offset + offset) from None
        offset += len(chunk) + 1
    if not rhs:
        raise SmilesSyntaxError("missing product", len(rxn))
    try:
        tgt = parse_smiles(rhs, check_valence)
    except SmilesSyntaxError as exc:
        raise SmilesSyntaxError(str(exc).rsplit(" at offset", 1)[0], exc.offset + offset) from None
    reactant, agents = split_roles(src, tgt)
    product = align_product(reactant, tgt)
    return ReactionRecord(reactant, tuple(agents), product, source=rxn, label=label)


# ================================================================ fingerprints


_BOND_CODE = {1.0: 1, 2.0: 2, 3.0: 3, 1.5: 4}


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return int(self.bits.shape[0])

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, width: int = FP_WIDTH) -> "Fingerprint":
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:width]
        return cls(bits.astype(np.uint8))

    def __eq__(self, other):
        return isinstance(other, Fingerprint) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.to_bytes())


def atom_invariant_hash(element: str, degree: int, charge: int, aromatic: bool) -> int:
    return kernels.fnv1a64(f"{element}|{degree}|{charge}|{int(aromatic)}".encode("ascii"))


def fingerprint_inputs(m: MolGraph):
    n = m.n_atoms
    deg = m.degree()
    init = np.array([atom_invariant_hash(a.element, int(deg[i]), a.charge, a.aromatic)
                     for i, a in enumerate(m.atoms)], dtype=np.uint64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    idx, code = [], []
    for i in range(n):
        nb = m.neighbors(i)
        ptr[i + 1] = ptr[i] + len(nb)
        idx.extend(int(j) for j in nb)
        code.extend(_BOND_CODE[float(m.adj[i, j])] for j in nb)
    return init, ptr, np.array(idx, dtype=np.int64), np.array(code, dtype=np.uint8)


def fingerprint(m: MolGraph, radius: int = 2, width: int = FP_WIDTH) -> Fingerprint:
    """Hashed circular fingerprint (ECFP-like, FNV-1a 64)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if width <= 0 or width & (width - 1):
        raise ValueError("width must be a power of two")
    init, ptr, idx, code = fingerprint_inputs(m)
    bits = kernels.fingerprint_bits(init, ptr, idx, code, radius, width)
    return Fingerprint(np.asarray(bits, dtype=np.uint8))


def pack_u64(x: int) -> bytes:
    return struct.pack("<Q", x)
