import numpy as np
import pytest

from rxnflow.autodiff import Tensor, default_dtype, grad_check
from rxnflow.autodiff import ops as T
from rxnflow.chemgraph import parse_smiles
from rxnflow.encoders import (ATOM_FEATURES, AtomCountError, ConditionEncoder, ConditionFeaturizer, EncoderConfig,
                              FrequencyTable, GraphEncoder, atom_features, bond_classes, build_frequency_table,
                              encode_conditions, encode_reactant, freq_vector)

from conftest import random_graphs


@pytest.fixture(scope="module")
def encoder():
    return GraphEncoder(EncoderConfig(3, 64, 4, 64), np.random.default_rng(0))


def test_single_atom_shape(encoder):
    z = encode_reactant(parse_smiles("C"), encoder)
    assert z.shape == (1, 64) and np.isfinite(z).all()


def test_atom_count_overflow():
    enc = GraphEncoder(EncoderConfig(1, 8, 2, 4), np.random.default_rng(0))
    with pytest.raises(AtomCountError):
        encode_reactant(parse_smiles("CCCCC"), enc)


def test_permutation_equivariance(encoder):
    rng = np.random.default_rng(4)
    for g in random_graphs(20, seed=4):
        order = rng.permutation(g.n_atoms)
        z = encode_reactant(g, encoder)
        zp = encode_reactant(g.permute(order), encoder)
        assert np.abs(z[order] - zp).max() < 1e-5


def test_benzene_rows_equal(encoder):
    z = encode_reactant(parse_smiles("c1ccccc1"), encoder)
    assert np.abs(z - z[0]).max() < 1e-4


def test_features_and_bond_classes():
    g = parse_smiles("C=CC#N")
    f = atom_features(g)
    assert f.shape == (4, ATOM_FEATURES)
    cls = bond_classes(g)
    assert cls[0, 1] != cls[1, 2] != cls[2, 3]
    assert cls[0, 0] == cls[3, 3] and cls[0, 0] != cls[0, 3]


def test_encoder_gradients():
    with default_dtype(np.float64):
        rng = np.random.default_rng(0)
        enc = GraphEncoder(EncoderConfig(2, 8, 2, 16), rng)
        g = parse_smiles("CC(=O)N")
        w = rng.standard_normal((1, 4, 8))
        assert grad_check(lambda: T.sum(T.mul(enc.encode_graphs([g]), Tensor(w))), enc.parameters(),
                          probes=60, rng=rng) < 1e-3


# --------------------------------------------------------------- frequency


def test_frequency_table_counts_and_ties():
    a, b, c = (parse_smiles(s) for s in ("CO", "O", "N"))
    sets = [[a], [a], [a], [b], [b, a], [c], [b]]  # a:4, b:3, c:1
    t = build_frequency_table(sets, k=2)
    assert [s for s, _ in t.entries] == ["CO", "O"]
    t_all = build_frequency_table(sets, k=10)
    assert len(t_all) == 3
    tie = build_frequency_table([[b], [c]], k=2)
    assert [s for s, _ in tie.entries] == ["N", "O"]


def test_frequency_table_counts_once_per_reaction():
    a = parse_smiles("O")
    t = build_frequency_table([[a, a], [a]], k=4)
    assert t.entries == [("O", 2)]


def test_frequency_table_water_share():
    water, other = parse_smiles("O"), parse_smiles("CCO")
    sets = [[water]] * 2115 + [[other]] * 7885
    assert "O" in build_frequency_table(sets, 128)


def test_frequency_table_round_trip(tmp_path):
    t = FrequencyTable([("O", 5), ("CO", 2)])
    t.save(tmp_path / "t.tsv")
    assert (tmp_path / "t.tsv").read_text() == "5\tO\n2\tCO\n"
    assert FrequencyTable.load(tmp_path / "t.tsv").entries == t.entries


def test_freq_vector_rank_bit():
    thf = parse_smiles("C1CCOC1")
    table = FrequencyTable([("O", 9), ("CO", 5), ("C1CCOC1", 3)])
    h = freq_vector([thf], table, 8)
    assert list(np.nonzero(h)[0]) == [2]


# --------------------------------------------------------------- conditions


@pytest.fixture(scope="module")
def cond():
    agents = [parse_smiles(s) for s in ("O", "N", "CO", "CCO", "C1CCOC1", "ClCCl", "CC(=O)O", "CN(C)C=O")]
    table = build_frequency_table([[a] for a in agents], 128)
    return agents, ConditionFeaturizer(table, 128), ConditionEncoder(np.random.default_rng(1))


def test_empty_agent_set(cond):
    _, feat, enc = cond
    cv = encode_conditions([], feat, enc)
    assert not cv.h_freq.any() and not cv.h_set.any()
    assert cv.h_c.shape == (640,)


def test_permutation_invariance(cond):
    agents, feat, enc = cond
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        pick = [agents[i] for i in rng.choice(len(agents), k, replace=False)]
        a = encode_conditions(pick, feat, enc).h_c
        b = encode_conditions([pick[i] for i in rng.permutation(k)], feat, enc).h_c
        assert np.abs(a - b).max() < 1e-6


def test_popcount_bounds(cond):
    agents, feat, enc = cond
    cv = encode_conditions(agents[:3] + [parse_smiles("CCCCCC")], feat, enc)
    assert cv.h_freq.sum() <= 4 and cv.h_freq.sum() == 3
    assert set(np.unique(cv.h_freq)) <= {0.0, 1.0}


def test_condition_encoder_gradients(cond):
    agents, feat, _ = cond
    with default_dtype(np.float64):
        rng = np.random.default_rng(2)
        enc = ConditionEncoder(rng, fp_width=512, hidden=16, out=8, att=4, k=128)
        hf, fps, mask = feat.batch([agents[:2], agents[3:6], []])
        w = rng.standard_normal((3, 136))
        assert grad_check(lambda: T.sum(T.mul(enc(hf, fps, mask), Tensor(w))), enc.parameters(),
                          probes=80, rng=rng) < 1e-3
