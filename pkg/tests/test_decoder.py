import numpy as np
import pytest

from rxnflow.autodiff import Tensor, default_dtype, grad_check
from rxnflow.chemgraph import graphs_equal, parse_smiles
from rxnflow.decoder import (N_CHARGE, PRIOR_LOGIT, Decoder, DecoderOutput, Fuse, decode_product, round_bonds,
                             struct_loss)
from rxnflow.encoders import bond_classes, bond_onehot

from conftest import random_graphs


def own_labels(g):
    q = PRIOR_LOGIT * np.eye(N_CHARGE)[g.charges + 6]
    a = PRIOR_LOGIT * (2.0 * g.aromatic - 1.0)
    return q, a


def test_zero_deltas_reproduce_reactant(graphs):
    for g in graphs:
        z = np.zeros((g.n_atoms, g.n_atoms))
        assert graphs_equal(decode_product(g, z, z, *own_labels(g)), g)


def test_bond_edit_arithmetic():
    g = parse_smiles("CCO.N")
    inc, dec = np.zeros((4, 4)), np.zeros((4, 4))
    dec[1, 2] = dec[2, 1] = 1.0
    inc[2, 3] = inc[3, 2] = 1.0
    out = decode_product(g, inc, dec, *own_labels(g))
    assert out.adj[1, 2] == 0 and out.adj[2, 3] == 1 and out.adj[0, 1] == 1


def test_rounding_oracle():
    levels = np.array([0.0, 1.0, 1.5, 2.0, 3.0])
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 4, 2000)
    brute = np.array([levels[np.argmin(np.abs(min(max(v, 0), 3) - levels))] for v in x])
    assert np.array_equal(round_bonds(x), brute)
    assert round_bonds(np.array([1.4, 1.2, 1.25, 2.5, 7.0, -2.0])).tolist() == [1.5, 1.0, 1.0, 2.0, 3.0, 0.0]


def test_decoded_adjacency_symmetric():
    g = parse_smiles("CC(=O)O")
    rng = np.random.default_rng(1)
    out = decode_product(g, rng.uniform(0, 2, (4, 4)), rng.uniform(0, 2, (4, 4)), *own_labels(g))
    assert np.array_equal(out.adj, out.adj.T) and not np.diag(out.adj).any()


def test_fuse_identity_at_init():
    fuse = Fuse(8, np.random.default_rng(2))
    z = Tensor(np.random.default_rng(3).standard_normal((2, 5, 8)))
    assert np.allclose(fuse(z, z).data, z.data)
    assert fuse(z, Tensor(np.zeros((2, 5, 8)))).shape == (2, 5, 8)


def _inputs(graphs, d, rng):
    edges = np.stack([bond_onehot(bond_classes(g)) for g in graphs])
    q = np.stack([g.charges for g in graphs])
    a = np.stack([g.aromatic for g in graphs])
    n = graphs[0].n_atoms
    return rng.standard_normal((len(graphs), n, d)), edges, q, a


def test_untrained_decoder_copies_reactant():
    rng = np.random.default_rng(4)
    dec = Decoder(16, 4, 2, rng)
    for g in random_graphs(10, seed=5):
        z, edges, q, a = _inputs([g], 16, rng)
        out = dec(Tensor(z), Tensor(z + rng.standard_normal(z.shape)), edges, q, a)
        m_inc, m_dec, ql, al = out.numpy(0)
        assert np.abs(m_inc - m_inc.T).max() == 0
        assert graphs_equal(decode_product(g, m_inc, m_dec, ql, al), g)


def test_struct_loss_examples():
    n = 4
    delta = np.zeros((1, n, n))
    delta[0, 0, 1] = delta[0, 1, 0] = 1.0
    zero = Tensor(np.zeros((1, n, n)))
    out = DecoderOutput(zero, zero, Tensor(np.zeros((1, n, N_CHARGE))), Tensor(np.zeros((1, n))))
    loss, _ = struct_loss(out, delta, np.zeros((1, n), int), np.zeros((1, n)), w_center=1.0, lambda_prop=0.0)
    assert np.isclose(loss.data, 2 / n ** 2)
    perfect = DecoderOutput(Tensor(np.maximum(delta, 0)), Tensor(np.maximum(-delta, 0)),
                            Tensor(50.0 * np.eye(N_CHARGE)[np.full((1, n), 6)]), Tensor(-50.0 * np.ones((1, n))))
    loss, _ = struct_loss(perfect, delta, np.zeros((1, n), int), np.zeros((1, n)))
    assert float(loss.data) < 1e-3
    with pytest.raises(Exception):
        struct_loss(out, np.zeros((1, 3, 3)), np.zeros((1, 3), int), np.zeros((1, 3)))


def test_decoder_gradients():
    with default_dtype(np.float64):
        rng = np.random.default_rng(6)
        dec = Decoder(8, 2, 1, rng)
        for p in dec.parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        g = parse_smiles("CC(=O)N")
        z, edges, q, a = _inputs([g], 8, rng)
        zr, zh = Tensor(z), Tensor(z + 0.5 * rng.standard_normal(z.shape))
        delta = np.zeros((1, 4, 4))
        delta[0, 1, 3] = delta[0, 3, 1] = 1.0

        def loss():
            return struct_loss(dec(zr, zh, edges, q, a), delta, q, a)[0]
        assert grad_check(loss, dec.parameters(), probes=100, rng=rng) < 1e-3
