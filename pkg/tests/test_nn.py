import numpy as np
import pytest

from icepll import nn
from icepll.losses import LossConfig, batch_loss, batch_loss_and_grad
from icepll.nn import Conv2d, Dense, Dropout, GlobalAvgPool, MaxPool, Relu, ShapeMismatch, StaleCache

from .oracles import central_diff, rel_err

GOLDEN_DEFAULT_CHECKSUM = "e59503a704ddccf9a84e1769356194f208299a27b3ad9dc41a7f3a6ea3cebadb"

TINY = [Conv2d(3, 3, 4), Relu(), MaxPool(2), Conv2d(2, 4, 5, stride=2), Relu(), GlobalAvgPool(),
        Dense(5, 7), Relu(), Dropout(0.3), Dense(7, 6)]


def test_default_build_golden_checksum():
    net = nn.build_network(seed=0)
    assert net.checksum() == GOLDEN_DEFAULT_CHECKSUM
    assert nn.build_network(seed=0).checksum() == net.checksum()
    assert nn.build_network(seed=1).checksum() != net.checksum()


def test_default_spec_head():
    spec = nn.default_spec()
    dense = [l for l in spec if isinstance(l, Dense)]
    assert [(d.in_dim, d.out_dim) for d in dense] == [(16, 64), (64, 64), (64, 6)]
    assert [l.rate for l in spec if isinstance(l, Dropout)] == [0.25, 0.25]


@pytest.mark.parametrize("spec", [
    [Conv2d(3, 3, 8), Relu(), GlobalAvgPool(), Dense(8, 64), Dense(64, 7)],
    [Conv2d(3, 3, 8), Relu(), GlobalAvgPool(), Dense(16, 6)],
    [Conv2d(3, 3, 8), Conv2d(3, 4, 8), GlobalAvgPool(), Dense(8, 6)],
    [Conv2d(3, 3, 8), Dense(8, 6)],
    [Conv2d(3, 3, 8), GlobalAvgPool()],
])
def test_shape_mismatch_on_build(spec):
    with pytest.raises(ShapeMismatch):
        nn.build_network(spec, seed=0)


def test_forward_shape_errors():
    net = nn.build_network(seed=0)
    with pytest.raises(ShapeMismatch):
        nn.forward(net, np.zeros((2, 2, 16, 16)))
    with pytest.raises(ShapeMismatch):
        nn.forward(net, np.zeros((2, 3, 16)))
    with pytest.raises(ShapeMismatch):
        nn.forward(net, np.zeros((2, 3, 3, 3)))


def test_inference_determinism_and_zero_dropout():
    x = np.random.default_rng(0).normal(size=(4, 3, 12, 12))
    net = nn.build_network(seed=3)
    a, _ = nn.forward(net, x)
    b, _ = nn.forward(net, x)
    np.testing.assert_array_equal(a, b)
    net0 = nn.build_network(nn.default_spec(dropout=0.0), seed=3)
    t, _ = nn.forward(net0, x, training=True, rng=np.random.default_rng(1))
    i, _ = nn.forward(net0, x, training=False)
    np.testing.assert_array_equal(t, i)


def test_zero_input_propagates_biases():
    spec = [Conv2d(3, 3, 2), Relu(), GlobalAvgPool(), Dense(2, 6)]
    net = nn.build_network(spec, seed=0)
    net.params["0.b"][:] = [0.5, -1.0]
    net.params["3.W"][:] = np.arange(12).reshape(2, 6) / 10
    net.params["3.b"][:] = 0.1
    z, _ = nn.forward(net, np.zeros((1, 3, 5, 5)))
    # relu([0.5, -1]) = [0.5, 0]; 0.5 * row 0 + 0.1
    np.testing.assert_allclose(z[0], [0.1, 0.15, 0.2, 0.25, 0.3, 0.35], atol=1e-15)


LAYER_CASES = [
    (Conv2d(3, 2, 3), (2, 2, 6, 7)),
    (Conv2d(2, 3, 2, stride=2), (2, 3, 7, 6)),
    (Relu(), (2, 3, 4, 4)),
    (MaxPool(2), (2, 2, 5, 6)),
    (MaxPool(3), (1, 2, 6, 6)),
    (GlobalAvgPool(), (2, 3, 4, 5)),
    (Dense(5, 4), (3, 5)),
    (Dropout(0.4), (3, 6)),
]


def _layer_params(layer, rng):
    if isinstance(layer, Conv2d):
        return {"W": rng.normal(size=(layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)),
                "b": rng.normal(size=layer.out_channels)}
    if isinstance(layer, Dense):
        return {"W": rng.normal(size=(layer.in_dim, layer.out_dim)), "b": rng.normal(size=layer.out_dim)}
    return {}


@pytest.mark.parametrize("layer,shape", LAYER_CASES, ids=lambda v: type(v).__name__ if not isinstance(v, tuple) else "x")
def test_layer_gradients_match_finite_differences(layer, shape):
    rng = np.random.default_rng(42)
    for trial in range(5):
        params = _layer_params(layer, rng)
        x = rng.normal(size=shape)
        out, _ = nn.layer_forward(layer, params, x, True, np.random.default_rng(trial))
        upstream = rng.normal(size=out.shape)

        def f(xx, pp=params):
            o, _ = nn.layer_forward(layer, pp, xx, True, np.random.default_rng(trial))
            return float(np.sum(o * upstream))

        _, cache = nn.layer_forward(layer, params, x, True, np.random.default_rng(trial))
        dx, dp = nn.layer_backward(layer, params, upstream, cache)
        assert rel_err(dx, central_diff(f, x)) < 1e-5
        for name, value in params.items():
            def fp(v, name=name):
                return f(x, {**params, name: v})
            assert rel_err(dp[name], central_diff(fp, value)) < 1e-5


@pytest.mark.parametrize("cfg", [LossConfig.cce(), LossConfig.focal(0.25, 1)], ids=["cce", "focal"])
def test_end_to_end_parameter_gradients(cfg):
    rng = np.random.default_rng(7)
    net = nn.build_network(TINY, seed=5)
    for name in net.params:
        if name.endswith(".b"):
            net.params[name][:] = rng.normal(scale=0.1, size=net.params[name].shape)
    x = rng.normal(size=(3, 3, 10, 10))
    y = rng.dirichlet(np.ones(6), size=3)

    def loss_of(params):
        trial = nn.Network(net.spec, params)
        z, _ = nn.forward(trial, x, training=True, rng=np.random.default_rng(99))
        return batch_loss(z, y, cfg)

    z, cache = nn.forward(net, x, training=True, rng=np.random.default_rng(99))
    _, dz = batch_loss_and_grad(z, y, cfg)
    grads = nn.backward(net, cache, dz)
    for name, value in net.params.items():
        fd = central_diff(lambda v: loss_of({**net.params, name: v}), value)
        assert rel_err(grads[name], fd) < 1e-5, name


def test_zero_upstream_gives_zero_gradients():
    net = nn.build_network(TINY, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 3, 10, 10))
    z, cache = nn.forward(net, x)
    grads = nn.backward(net, cache, np.zeros_like(z))
    assert all(not np.any(g) for g in grads.values())


def test_batch_gradient_is_mean_of_single_gradients():
    cfg = LossConfig.focal(0.25, 1)
    net = nn.build_network(TINY, seed=2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 10, 10))
    y = rng.dirichlet(np.ones(6), size=2)

    def grads_for(xs, ys):
        z, cache = nn.forward(net, xs)
        return nn.backward(net, cache, batch_loss_and_grad(z, ys, cfg)[1])

    both = grads_for(x, y)
    g0, g1 = grads_for(x[:1], y[:1]), grads_for(x[1:], y[1:])
    for name in both:
        np.testing.assert_allclose(both[name], (g0[name] + g1[name]) / 2, rtol=1e-12, atol=1e-15)


def test_stale_cache():
    net = nn.build_network(TINY, seed=0)
    z, cache = nn.forward(net, np.zeros((2, 3, 10, 10)))
    with pytest.raises(StaleCache):
        nn.backward(net, cache, np.zeros((3, 6)))


def test_dropout_expectation():
    layer = Dropout(0.25)
    x = np.random.default_rng(0).uniform(0.5, 2.0, size=(1, 64))
    draws = np.stack([nn.layer_forward(layer, {}, x, True, np.random.default_rng(s))[0] for s in range(4000)])
    mean = draws.mean(axis=0)
    assert np.all(np.abs(mean - x) <= 0.02 * x)


def test_predict_tie_break_and_order():
    spec = [Conv2d(1, 3, 1), GlobalAvgPool(), Dense(1, 6)]
    net = nn.build_network(spec, seed=0)
    for k in net.params:
        net.params[k][:] = 0.0
    assert nn.predict(net, np.zeros((1, 3, 2, 2))).tolist() == [0]
    net.params["2.b"][:] = [0, 0, 0, 0, 1.0, 0]
    assert nn.predict(net, np.zeros((1, 3, 2, 2))).tolist() == [4]
    # class index follows the input sign through the single dense weight
    net.params["0.W"][:] = 1.0
    net.params["2.W"][0] = [0, 3.0, 0, 0, 0, -3.0]
    x = np.stack([np.full((3, 2, 2), v) for v in (1.0, -1.0, 1.0, -1.0, 0.0)])
    assert nn.predict(net, x).tolist() == [1, 5, 1, 5, 4]


def test_checkpoint_roundtrip(tmp_path):
    net = nn.build_network(seed=4)
    path = tmp_path / "m.tnet"
    nn.save_checkpoint(net, path, meta={"note": "x"})
    raw = path.read_bytes()
    assert raw[:4] == b"TNET"
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.spec == net.spec
    assert loaded.checksum() == net.checksum()
    path.write_bytes(raw[:-8])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
