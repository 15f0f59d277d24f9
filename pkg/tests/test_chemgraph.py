import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rxnflow.chemgraph import (Atom, AtomConservationError, Fingerprint, MolGraph, SerializationError,
                               SmilesSyntaxError, StructureError, UnsupportedFeatureError, ValenceError,
                               canonical_smiles, dumps_graph, fingerprint, graph_from_json, graph_to_json,
                               graphs_equal, molecules, parse_reaction, parse_smiles, split_roles, write_smiles)

from conftest import random_graphs


def ref_fnv(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ------------------------------------------------------------------ parsing


def test_single_carbon():
    g = parse_smiles("C")
    assert g.n_atoms == 1 and g.elements == ["C"] and not g.adj.any()


def test_mapped_methanol():
    g = parse_smiles("[CH3:1][OH:2]")
    assert g.n_atoms == 2
    assert g.adj[0, 1] == 1.0
    assert list(g.maps) == [1, 2]


def test_benzene_matches_hand_adjacency():
    g = parse_smiles("c1ccccc1")
    ref = np.zeros((6, 6))
    for i in range(6):
        ref[i, (i + 1) % 6] = ref[(i + 1) % 6, i] = 1.5
    assert np.array_equal(g.adj, ref)
    assert g.aromatic.all()


def test_branches_rings_charges():
    g = parse_smiles("CC(=O)[O-].[NH4+]")
    assert g.n_atoms == 5
    assert g.adj[1, 2] == 2.0 and g.adj[1, 3] == 1.0
    assert list(g.charges) == [0, 0, 0, -1, 1]
    assert len(g.components()) == 2


def test_double_digit_ring_and_bond_symbols():
    g = parse_smiles("C%10CC#CC=CC%10")
    assert g.adj[0, 6] == 1.0
    assert g.adj[2, 3] == 3.0 and g.adj[4, 5] == 2.0


@pytest.mark.parametrize("text,offset", [("C(C", 3), ("C1CC", 1), ("CX", 1), ("C)", 1), ("[C", 0), ("C..C", 2), (".C", 0), ("C.", 1), ("C=", 1)])
def test_syntax_errors_carry_offset(text, offset):
    with pytest.raises(SmilesSyntaxError) as exc:
        parse_smiles(text)
    assert exc.value.offset == offset


@pytest.mark.parametrize("text", ["F/C=C/F", "C[C@H](N)O", "[13CH4]", "C\\C=C"])
def test_unsupported_features_rejected(text):
    with pytest.raises(UnsupportedFeatureError):
        parse_smiles(text)


@pytest.mark.parametrize("text", ["C(C)(C)(C)(C)C", "O(C)(C)C", "FC(F)(F)(F)F", "N(C)(C)(C)C", "C=C=C=C#C"])
def test_overvalent_graphs_rejected(text):
    with pytest.raises(ValenceError) as exc:
        parse_smiles(text)
    assert exc.value.element in ("C", "O", "N", "F")
    assert str(exc.value.index) in str(exc.value)


def test_ammonium_allows_four_bonds():
    assert parse_smiles("C[N+](C)(C)C").is_valence_valid()


def test_generator_graphs_pass_valence(graphs):
    assert all(g.is_valence_valid() for g in graphs)


# ------------------------------------------------------------ graph model


def test_structure_invariants():
    with pytest.raises(StructureError):
        MolGraph((Atom("C"), Atom("C")), np.array([[0, 1], [0, 0]]))
    with pytest.raises(StructureError):
        MolGraph((Atom("C"), Atom("C")), np.array([[0, 2.5], [2.5, 0]]))
    with pytest.raises(StructureError):
        MolGraph((Atom("C", amap=1), Atom("C", amap=1)), np.zeros((2, 2)))
    with pytest.raises(StructureError):
        MolGraph((Atom("C", charge=7),), np.zeros((1, 1)))


def test_graphs_equal_basics():
    g = parse_smiles("CCO")
    assert graphs_equal(g, g)
    adj = np.array(g.adj)
    adj[0, 1] = adj[1, 0] = 2.0
    assert not graphs_equal(g, MolGraph(g.atoms, adj))
    with pytest.raises(StructureError):
        graphs_equal(g, parse_smiles("CC"))


def test_round_trip_corpus_molecules(graphs):
    for g in graphs:
        text, order = write_smiles(g)
        again = parse_smiles(text)
        assert graphs_equal(g.permute(order), again)
        assert again.elements == g.permute(order).elements
        assert canonical_smiles(again) == canonical_smiles(g)


@given(st.integers(0, 99), st.randoms(use_true_random=False))
def test_canonical_smiles_is_order_invariant(i, rnd):
    g = random_graphs(1, seed=i)[0]
    order = list(range(g.n_atoms))
    rnd.shuffle(order)
    assert canonical_smiles(g) == canonical_smiles(g.permute(order))


def test_graph_json_round_trip(graphs):
    for g in graphs[:20]:
        h = graph_from_json(graph_to_json(g))
        assert graphs_equal(g, h) and h.elements == g.elements
    with pytest.raises(SerializationError):
        graph_from_json({"atoms": ["C"], "bonds": [[0, 5, 1]]})
    assert dumps_graph(graphs[0]).startswith("{")


# ----------------------------------------------------------------- roles


def test_split_roles_reactant_and_agent():
    a = parse_smiles("[CH3:1][OH:2]")
    b = parse_smiles("CCO")
    tgt = parse_smiles("[CH2:1]=[O:2]")
    r, agents = split_roles([a, b], tgt)
    assert graphs_equal(r, a) and len(agents) == 1 and agents[0].n_atoms == 3


def test_split_roles_union():
    a, b = parse_smiles("[CH4:1]"), parse_smiles("[OH2:2]")
    r, agents = split_roles([a, b], parse_smiles("[CH3:1][OH:2]"))
    assert r.n_atoms == 2 and agents == []


def test_split_roles_missing_map():
    with pytest.raises(AtomConservationError):
        split_roles([parse_smiles("[CH4:1]")], parse_smiles("[CH3:1][OH:3]"))


def test_reindexing_with_gaps_is_a_bijection():
    line = "[CH3:5][C:3](=[O:4])[Cl:9].[OH:1][CH3:2].CCN(CC)CC>>[CH3:5][C:3](=[O:4])[O:1][CH3:2].[ClH:9]"
    rec = parse_reaction(line)
    assert rec.reactant.n_atoms == 6 and len(rec.agents) == 1
    assert list(rec.reactant.maps) == [1, 2, 3, 4, 5, 9]
    src = molecules(parse_smiles(line.split(">")[0]))
    merged_maps = {int(a.amap): (gi, i) for gi, g in enumerate(src) for i, a in enumerate(g.atoms) if a.amap}
    for k, a in enumerate(rec.reactant.atoms):
        gi, i = merged_maps[int(a.amap)]
        for l, b in enumerate(rec.reactant.atoms):
            gj, j = merged_maps[int(b.amap)]
            expect = src[gi].adj[i, j] if gi == gj else 0.0
            assert rec.reactant.adj[k, l] == expect
    d = rec.bond_delta()
    assert (d < 0).sum() == 2 and (d > 0).sum() == 2  # C-Cl and O-H-side bonds swap


def test_split_roles_conserves_atoms(graphs):
    a = graphs[0].with_atoms(Atom(x.element, x.charge, x.aromatic, i + 1) for i, x in enumerate(graphs[0].atoms))
    b, c = graphs[1], graphs[2]
    r, agents = split_roles([b, a, c], a)
    assert r.n_atoms + sum(g.n_atoms for g in agents) == a.n_atoms + b.n_atoms + c.n_atoms


def test_reaction_line_round_trip():
    rec = parse_reaction("[CH3:1][CH2:2][Cl:3].[OH2:4]>O>[CH3:1][CH2:2][OH:4].[ClH:3] 7")
    again = parse_reaction(rec.to_line())
    assert graphs_equal(rec.reactant, again.reactant) and graphs_equal(rec.product, again.product)
    assert again.label == "7"


# ----------------------------------------------------------- fingerprints


def test_methane_fingerprint_oracle():
    h0 = ref_fnv(b"C|0|0|0")
    h1 = ref_fnv(struct.pack("<Q", h0))
    h2 = ref_fnv(struct.pack("<Q", h1))
    fp = fingerprint(parse_smiles("C"), 2, 512)
    assert set(np.nonzero(fp.bits)[0]) == {h0 % 512, h1 % 512, h2 % 512}
    assert fp.popcount in (1, 2, 3)


def test_fingerprint_bytes_little_endian():
    bits = np.zeros(512, dtype=np.uint8)
    bits[0] = bits[9] = 1
    raw = Fingerprint(bits).to_bytes()
    assert raw[0] == 1 and raw[1] == 2
    assert Fingerprint.from_bytes(raw) == Fingerprint(bits)


@given(st.integers(0, 99), st.randoms(use_true_random=False))
def test_fingerprint_permutation_invariant(i, rnd):
    g = random_graphs(1, seed=i)[0]
    order = list(range(g.n_atoms))
    rnd.shuffle(order)
    assert fingerprint(g) == fingerprint(g.permute(order))


def test_fingerprint_distinguishes_molecules(graphs):
    assert fingerprint(parse_smiles("C")) != fingerprint(parse_smiles("O"))
    keys = {}
    for g in graphs:
        keys.setdefault(canonical_smiles(g), fingerprint(g).to_bytes())
    distinct = list(keys.values())
    collisions = len(distinct) - len(set(distinct))
    assert collisions / len(distinct) < 0.05


def test_fingerprint_argument_checks():
    with pytest.raises(ValueError):
        fingerprint(parse_smiles("C"), radius=-1)
    with pytest.raises(ValueError):
        fingerprint(parse_smiles("C"), width=500)
