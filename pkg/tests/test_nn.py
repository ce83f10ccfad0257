import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import check_arrays
from ladle.errors import NonFinite, ParseError, SchemaMismatch, ShapeMismatch
from ladle.models import ConvDenoiser, MLPDenoiser, PointNetLite, build_net, load_into
from ladle.nn import (Adam, Conv1d, FiLM, Linear, MaxPool, Mish, Params, load_checkpoint,
                      save_checkpoint, sinusoidal_embedding)

N_INSTANCES = 100
TOL = 1e-4


def _perturb(params, rng, scale=0.3):
    for k in params:
        params.values[k] += rng.normal(size=params[k].shape) * scale


def layer_case(kind, rng):
    """Returns (loss, arrays, analytic grads) for one random instance."""
    p = Params()
    b = int(rng.integers(1, 4))
    if kind == "linear":
        layer = Linear(p, "l", int(rng.integers(1, 6)), int(rng.integers(1, 6)), rng)
        _perturb(p, rng)
        x = rng.normal(size=(b, int(rng.integers(1, 4)), layer.n_in))
        fwd = lambda: layer.forward(x)  # noqa: E731
    elif kind == "conv":
        k = int(rng.choice([1, 3, 5]))
        layer = Conv1d(p, "c", int(rng.integers(1, 5)), int(rng.integers(1, 5)), k, rng)
        _perturb(p, rng)
        x = rng.normal(size=(b, int(rng.integers(1, 6)), layer.c_in))
        fwd = lambda: layer.forward(x)  # noqa: E731
    elif kind == "mish":
        layer = Mish()
        x = rng.normal(size=(b, int(rng.integers(1, 8)))) * 3
        fwd = lambda: layer.forward(x)  # noqa: E731
    elif kind == "maxpool":
        layer = MaxPool(axis=1)
        x = rng.normal(size=(b, int(rng.integers(2, 9)), int(rng.integers(1, 5))))
        fwd = lambda: layer.forward(x)  # noqa: E731
    elif kind == "film":
        layer = FiLM()
        c = int(rng.integers(1, 6))
        shape = (b, c) if rng.random() < 0.5 else (b, int(rng.integers(1, 4)), c)
        x, g, be = rng.normal(size=shape), rng.normal(size=(b, c)), rng.normal(size=(b, c))
        out0, cache = layer.forward(x, g, be)
        r = rng.normal(size=out0.shape)
        gx, gg, gb = layer.backward(cache, r)
        loss = lambda: float((layer.forward(x, g, be)[0] * r).sum())  # noqa: E731
        return loss, [x, g, be], [gx, gg, gb]
    else:
        raise ValueError(kind)
    out0, cache = fwd()
    r = rng.normal(size=out0.shape)
    gx = layer.backward(cache, r)
    loss = lambda: float((fwd()[0] * r).sum())  # noqa: E731
    return loss, [x] + [p.values[k] for k in p], [gx] + [p.grads[k] for k in p]


@pytest.mark.parametrize("kind", ["linear", "conv", "mish", "maxpool", "film"])
def test_layer_gradients_finite_difference(kind):
    rng = np.random.default_rng(["linear", "conv", "mish", "maxpool", "film"].index(kind))
    worst = 0.0
    for _ in range(N_INSTANCES):
        loss, arrays, grads = layer_case(kind, rng)
        worst = max(worst, check_arrays(loss, arrays, grads, rng))
    assert worst <= TOL


def net_case(kind, rng):
    if kind == "mlp":
        net = MLPDenoiser(2, 3, 8, 8, rng)
        b = int(rng.integers(1, 4))
        x, c, t = rng.normal(size=(b, 2)), rng.normal(size=(b, 3)), rng.integers(0, 50, b)
        fwd = lambda: net.forward(x, c, t)  # noqa: E731
        inputs = [x, c]
    elif kind == "conv":
        net = ConvDenoiser(4, 3, 6, 8, 8, rng=rng)
        b = int(rng.integers(1, 3))
        x, c, t = rng.normal(size=(b, 3, 4)), rng.normal(size=(b, 6)), rng.integers(0, 50, b)
        fwd = lambda: net.forward(x, c, t)  # noqa: E731
        inputs = [x, c]
    else:
        net = PointNetLite((6, 8), 5, rng=rng)
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(3, 12)), 3))
        fwd = lambda: net.forward(x)  # noqa: E731
        inputs = [x]
    _perturb(net.params, rng)
    out0, cache = fwd()
    r = rng.normal(size=out0.shape)
    g_in = net.backward(cache, r)
    g_in = list(g_in) if isinstance(g_in, tuple) else [g_in]
    loss = lambda: float((fwd()[0] * r).sum())  # noqa: E731
    names = list(net.params)
    return (loss, inputs + [net.params.values[k] for k in names],
            g_in + [net.params.grads[k] for k in names])


@pytest.mark.parametrize("kind", ["mlp", "conv", "pointnet"])
def test_network_gradients_finite_difference(kind):
    rng = np.random.default_rng(len(kind))
    worst = 0.0
    for _ in range(20):
        loss, arrays, grads = net_case(kind, rng)
        worst = max(worst, check_arrays(loss, arrays, grads, rng, n_entries=2))
    assert worst <= TOL


def test_zero_linear_and_identity_conv():
    p = Params()
    lin = Linear(p, "z", 4, 3, np.random.default_rng(0), init="zero")
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert not lin.forward(x)[0].any()
    conv = Conv1d(p, "i", 4, 4, 3, init="identity")
    seq = np.random.default_rng(2).normal(size=(2, 6, 4))
    np.testing.assert_array_equal(conv.forward(seq)[0], seq)


def test_affine_gradient_closed_form():
    p = Params()
    lin = Linear(p, "l", 3, 1)
    x = np.array([[0.5, -2.0, 3.0]])
    _, cache = lin.forward(x)
    lin.backward(cache, np.ones((1, 1)))
    np.testing.assert_array_equal(p.grads["l.w"][:, 0], x[0])


def test_gradient_accumulates():
    rng = np.random.default_rng(0)
    net = MLPDenoiser(2, 2, 8, 8, rng)
    x, c, t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), np.array([1, 2, 3])
    y, cache = net.forward(x, c, t)
    net.backward(cache, np.ones_like(y))
    once = {k: g.copy() for k, g in net.params.grads.items()}
    net.backward(cache, np.ones_like(y))
    for k, g in net.params.grads.items():
        np.testing.assert_array_equal(g, 2 * once[k])


def test_forward_deterministic():
    net = PointNetLite(rng=np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(2, 40, 3))
    np.testing.assert_array_equal(net.forward(x)[0], net.forward(x)[0])


def test_shape_and_finiteness_errors():
    p = Params()
    lin = Linear(p, "l", 3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        lin.forward(np.zeros((2, 4)))
    with pytest.raises(NonFinite):
        lin.forward(np.array([[np.inf, 0.0, 0.0]]))
    with pytest.raises(ShapeMismatch):
        Conv1d(p, "c", 2, 2, 2)
    with pytest.raises(ShapeMismatch):
        FiLM().forward(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))


def test_adam_zero_gradient_leaves_params():
    net = MLPDenoiser(2, 2, 4, 4, np.random.default_rng(0))
    before = net.params.copy()
    opt = Adam(net.params)
    opt.step()
    assert opt.t == 1
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_adam_descends_against_constant_gradient():
    p = Params()
    p.add("w", np.zeros(3))
    opt = Adam(p, lr=0.01)
    g = np.array([1.0, -2.0, 0.5])
    for k in range(50):
        p.grads["w"][...] = g
        opt.step()
        assert opt.t == k + 1
        assert not p.grads["w"].any()
    assert np.all(np.sign(p["w"]) == -np.sign(g))


def test_training_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        net = MLPDenoiser(2, 2, 8, 8, rng)
        opt = Adam(net.params, lr=1e-2)
        x, c = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
        for _ in range(20):
            y, cache = net.forward(x, c, np.arange(16))
            net.backward(cache, 2 * (y - x) / y.size)
            opt.step()
        return net.params.digest()
    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    net = ConvDenoiser(10, 3, 20, 16, 8, rng=np.random.default_rng(1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net.params, net.spec)
    spec, arrays = load_checkpoint(path)
    other = build_net(spec)
    load_into(other, arrays)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], other.params[k])
    assert other.params.digest() == net.params.digest()


def test_checkpoint_corruption(tmp_path):
    net = MLPDenoiser(2, 2, 4, 4, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net.params, net.spec)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(path)
    path.write_bytes(data + b"\0" * 8)
    with pytest.raises(ParseError):
        load_checkpoint(path)
    path.write_bytes(data.replace(b'"width":4', b'"width":5', 1))
    with pytest.raises(SchemaMismatch):
        load_checkpoint(path)
    path.write_bytes(b"nope\n")
    with pytest.raises(ParseError):
        load_checkpoint(path)


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=20))
def test_sinusoidal_embedding_bounded(ts):
    e = sinusoidal_embedding(ts, 32)
    assert e.shape == (len(ts), 32)
    np.testing.assert_allclose(e[:, :16] ** 2 + e[:, 16:] ** 2, 1.0, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(2, 30))
def test_maxpool_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, n, 3))
    perm = rng.permutation(n)
    pool = MaxPool(axis=1)
    np.testing.assert_array_equal(pool.forward(x)[0], pool.forward(x[:, perm])[0])
