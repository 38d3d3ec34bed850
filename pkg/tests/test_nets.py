import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anesgan.nets import (Discriminator, Generator, MLP, VAEGenerator, load_checkpoint,
                          save_checkpoint, xavier_uniform)
from anesgan.tensor import NonFiniteError, ShapeError, Tensor

from conftest import numeric_grad, rel_err

T = 12


def onehot(k, n=3, b=4):
    c = np.zeros((b, n))
    c[:, k] = 1.0
    return c


def test_xavier_bounds_and_zero_biases(rng):
    m = MLP([10, 6, 1], rng)
    bound = np.sqrt(6 / 16)
    assert np.all(np.abs(m.weights[0].data) <= bound)
    assert all(np.all(b.data == 0) for b in m.biases)
    assert [w.shape for w in m.weights] == [(10, 6), (6, 1)]


def test_generator_zero_params_gives_ln2(rng):
    g = Generator(T, seed=1)
    g.zero_parameters()
    out = g.generate(np.zeros((3, 4)), rng.standard_normal((3, 16))).data
    assert out.shape == (3, 2, T)
    assert np.all(out == np.log(2.0))


def test_generator_determinism_and_variance(rng):
    g = Generator(T, seed=2)
    cov = np.tile(rng.standard_normal(4), (1000, 1))
    z = rng.standard_normal((1000, 16))
    a, b = g.generate(cov, z).data, g.generate(cov, z).data
    assert np.array_equal(a, b)
    assert np.all(a.var(axis=0) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(-50, 50))
def test_generator_non_negative(seed, scale):
    r = np.random.default_rng(seed)
    g = Generator(T, seed=seed)
    out = g.generate(scale * r.standard_normal((5, 4)), scale * r.standard_normal((5, 16))).data
    assert np.all(out >= 0)


def test_generator_rejects_covariate_width():
    with pytest.raises(ShapeError):
        Generator(T).generate(np.zeros((2, 3)), np.zeros((2, 16)))


def test_discriminator_zero_params():
    d = Discriminator(T, n_classes=4, seed=0)
    d.zero_parameters()
    s, p = d.discriminate(np.zeros((3, 2, T)), np.zeros((3, 4)), with_classes=True)
    assert np.all(s.data == 0.5)
    assert np.all(p.data == 0.25)


def test_discriminator_without_class_head_rejects_query():
    d = Discriminator(T)
    with pytest.raises(ValueError, match="class head"):
        d.discriminate(np.zeros((1, 2, T)), np.zeros((1, 4)), with_classes=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.1, 100))
def test_source_range_and_class_sum(seed, scale):
    r = np.random.default_rng(seed)
    d = Discriminator(T, n_classes=3, seed=seed)
    s, p = d.discriminate(scale * r.standard_normal((6, 2 * T)), r.standard_normal((6, 4)), True)
    assert np.all((s.data > 0) & (s.data < 1))
    assert np.all(np.abs(p.data.sum(axis=1) - 1.0) <= 1e-9)


def test_source_open_interval_at_moderate_inputs(rng):
    d = Discriminator(T, seed=3)
    s, _ = d.discriminate(rng.standard_normal((50, 2, T)), rng.standard_normal((50, 4)))
    assert np.all((s.data > 0) & (s.data < 1))


def test_critic_bias_shift_equivariance(rng):
    d = Discriminator(T, mode="critic", seed=4)
    x, cov = rng.standard_normal((5, 2, T)), rng.standard_normal((5, 4))
    s0 = d.discriminate(x, cov)[0].data.copy()
    d.net.biases[-1].data[0] += 0.37
    s1 = d.discriminate(x, cov)[0].data
    assert np.allclose(s1 - s0, 0.37, rtol=0, atol=1e-12)


def test_encode_sample_zero_noise_and_tiny_sigma(rng):
    v = VAEGenerator(T, n_classes=0, seed=5)
    x, cov = rng.standard_normal((4, 2, T)), rng.standard_normal((4, 4))
    z, mu, sigma, eps = v.encode_sample(x, cov, eps=np.zeros((4, 16)))
    assert np.array_equal(z.data, mu.data)
    v.encoder.weights[-1].data[:, 16:] = 0.0
    v.encoder.biases[-1].data[16:] = -20.0
    z, mu, sigma, _ = v.encode_sample(x, cov, rng=rng)
    assert np.max(np.abs(z.data - mu.data)) < 1e-8


def test_reparameterization_monte_carlo(rng):
    v = VAEGenerator(T, seed=6)
    x, cov = rng.standard_normal((1, 2, T)), rng.standard_normal((1, 4))
    n = 100_000
    z, mu, sigma, _ = v.encode_sample(np.repeat(x, n, 0), np.repeat(cov, n, 0), rng=rng)
    err = np.abs(z.data.mean(axis=0) - mu.data[0])
    assert np.all(err <= 3 * sigma.data[0] / np.sqrt(n) * 1.5)


def test_reparameterization_gradients(rng):
    mu = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    sigma = Tensor(np.exp(rng.standard_normal((3, 2))), requires_grad=True)
    eps = rng.standard_normal((3, 2))
    (mu + sigma * Tensor(eps)).reshape(-1).sum().backward()
    assert np.all(mu.grad == 1.0)
    assert np.allclose(sigma.grad, eps)
    f = lambda: float(np.sum(mu.data + sigma.data * eps))
    assert rel_err(sigma.grad, numeric_grad(f, [sigma])[0]) <= 1e-4


def test_placement_contract(rng):
    z, cov = rng.standard_normal((4, 16)), rng.standard_normal((4, 4))
    enc = VAEGenerator(T, n_classes=3, placement="encoder", seed=7)
    assert np.array_equal(enc.decode(z, cov, onehot(0)).data, enc.decode(z, cov, onehot(2)).data)
    both = VAEGenerator(T, n_classes=3, placement="both", seed=7)
    assert not np.array_equal(both.decode(z, cov, onehot(0)).data, both.decode(z, cov, onehot(2)).data)
    with pytest.raises(ValueError):
        VAEGenerator(T, n_classes=3, placement="decoder").decode(z, cov)
    with pytest.raises(ValueError):
        VAEGenerator(T, n_classes=3, placement="encoder").encode(np.zeros((4, 2, T)), cov)


def test_zero_decoder_is_constant(rng):
    v = VAEGenerator(T, seed=8)
    v.zero_parameters()
    out = v.decode(rng.standard_normal((3, 16)), rng.standard_normal((3, 4))).data
    assert np.all(out == out.flat[0])


def test_non_finite_names_layer():
    m = MLP([2, 3, 1], np.random.default_rng(0), name="q")
    m.weights[0].data[:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteError, match="q layer 0"):
        m(Tensor(np.full((1, 2), 10.0)))


def test_checkpoint_round_trip_bit_identical(tmp_path, rng):
    g = VAEGenerator(T, n_classes=2, placement="decoder", seed=9)
    d = Discriminator(T, n_classes=2, mode="critic", seed=10)
    optim = {"G": {"m0": rng.standard_normal(3)}}
    save_checkpoint(tmp_path / "a.ckpt", {"G": g, "D": d}, optim, {"step": 4})
    ck = load_checkpoint(tmp_path / "a.ckpt")
    z, cov = rng.standard_normal((5, 16)), rng.standard_normal((5, 4))
    c = np.eye(2)[[0, 1, 0, 1, 1]]
    assert ck.models["G"].decode(z, cov, c).data.tobytes() == g.decode(z, cov, c).data.tobytes()
    x = rng.standard_normal((5, 2, T))
    assert (ck.models["D"].discriminate(x, cov, True)[1].data.tobytes()
            == d.discriminate(x, cov, True)[1].data.tobytes())
    assert np.array_equal(ck.optim["G"]["m0"], optim["G"]["m0"]) and ck.meta == {"step": 4}
    save_checkpoint(tmp_path / "b.ckpt", ck.models, ck.optim, ck.meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
