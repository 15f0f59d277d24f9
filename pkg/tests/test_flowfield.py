import numpy as np
import pytest

from rxnflow.autodiff import Adam, ShapeError, Tape, Tensor, default_dtype, grad_check
from rxnflow.autodiff import ops as T
from rxnflow.flowfield import (TIME_DIM, VectorField, apply_film, flow_loss, sample_path, time_embedding)


@pytest.fixture
def field():
    return VectorField(8, 20, np.random.default_rng(0), hidden=16, cond_hidden=16)


def test_zero_init_field_is_null(field):
    z = Tensor(np.random.default_rng(1).standard_normal((3, 7, 8)))
    assert not field(z, np.array([0.1, 0.5, 0.9]), field.film_params(np.ones((3, 20)))).data.any()


def test_shape_and_time_dependence(field):
    rng = np.random.default_rng(2)
    field.phi.l2.weight.data = rng.standard_normal(field.phi.l2.weight.shape)
    z = Tensor(rng.standard_normal((7, 8)))
    a, b = field.base_field(z, 0.0).data, field.base_field(z, 1.0).data
    assert a.shape == (7, 8) and np.abs(a - b).max() > 0
    with pytest.raises(ValueError):
        field.base_field(z, 1.5)


def test_time_embedding_width():
    e = time_embedding(np.array([0.0, 0.3]))
    assert e.shape == (2, TIME_DIM)
    assert np.allclose(e[0, : TIME_DIM // 2], 0) and np.allclose(e[0, TIME_DIM // 2:], 1)


def test_film_arithmetic():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 5, 4)))
    zero = Tensor(np.zeros((2, 4)))
    assert np.array_equal(apply_film(x, zero, zero).data, x.data)
    assert np.allclose(apply_film(x, Tensor(np.ones((2, 4))), zero).data, 2 * x.data)
    b = np.arange(8.0).reshape(2, 4)
    out = apply_film(Tensor(np.zeros((2, 5, 4))), zero, Tensor(b)).data
    assert np.allclose(out, b[:, None, :])
    with pytest.raises(ShapeError):
        apply_film(x, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_film_identity_with_zeroed_conditioner(field):
    rng = np.random.default_rng(4)
    field.phi.l2.weight.data = rng.standard_normal(field.phi.l2.weight.shape)
    for _ in range(20):
        z = Tensor(rng.standard_normal((2, 5, 8)))
        t = rng.uniform(size=2)
        h_c = rng.standard_normal((2, 20))
        assert np.array_equal(field(z, t, field.film_params(h_c)).data, field(z, t, None).data)


def test_sample_path_examples():
    rng = np.random.default_rng(5)
    zr, zp = Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((4, 3)))
    assert np.allclose(sample_path(zr, zp, 0.0, t=0.0, eps=np.zeros((4, 3))).z_t.data, zr.data)
    mid = sample_path(zr, zp, 0.0, t=0.5, eps=np.zeros((4, 3))).z_t.data
    assert np.allclose(mid, 0.5 * (zr.data + zp.data))
    with pytest.raises(ShapeError):
        sample_path(zr, Tensor(np.zeros((3, 3))), rng=rng)


def test_sample_path_noise_energy():
    rng = np.random.default_rng(6)
    zr, zp = Tensor(np.zeros((4, 3))), Tensor(np.ones((4, 3)))
    tot = 0.0
    for _ in range(10_000):
        s = sample_path(zr, zp, 0.05, rng=rng)
        tot += float(((s.z_t.data - s.t) ** 2).sum())
    assert abs(tot / 10_000 / (0.05 ** 2 * 12) - 1) < 0.05


def test_target_is_condition_independent(field):
    rng = np.random.default_rng(7)
    zr, zp = Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((1, 3, 8)))
    s = sample_path(zr, zp, 0.05, rng=rng)
    assert np.allclose(s.target.data, zp.data - zr.data)


def test_flow_loss_oracles(field):
    rng = np.random.default_rng(8)
    zr, zp = Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((1, 3, 8)))
    s = sample_path(zr, zp, 0.05, rng=rng)
    assert np.isclose(flow_loss(s, field, None).data, np.mean((zp.data - zr.data) ** 2), rtol=1e-5)


def test_single_pair_memorization():
    rng = np.random.default_rng(9)
    f = VectorField(8, 4, rng, hidden=128)
    a, b = rng.standard_normal((1, 3, 8)), rng.standard_normal((1, 3, 8))
    zr, zp = Tensor(np.repeat(a, 32, 0)), Tensor(np.repeat(b, 32, 0))  # one pair, 32 time draws per step
    opt = Adam(f.named_parameters(), lr=3e-3)
    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            loss = flow_loss(sample_path(zr, zp, 0.0, rng=rng), f, None)
        tape.backward(loss)
        opt.step()
    grid = sample_path(zr, zp, 0.0, t=np.linspace(0, 1, 32), eps=np.zeros(zr.shape))
    assert float(flow_loss(grid, f, None).data) < 1e-3


def test_field_gradients():
    with default_dtype(np.float64):
        rng = np.random.default_rng(10)
        f = VectorField(4, 6, rng, hidden=8, cond_hidden=8)
        for p in f.parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        z = Tensor(rng.standard_normal((2, 3, 4)))
        h = rng.standard_normal((2, 6))
        w = rng.standard_normal((2, 3, 4))
        assert grad_check(lambda: T.sum(T.mul(f(z, np.array([0.2, 0.7]), f.film_params(h)), Tensor(w))),
                          f.parameters(), probes=80, rng=rng) < 1e-3
