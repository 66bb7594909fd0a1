import numpy as np
import pytest

from icepll import data, nn
from icepll.labels import LabelKind
from icepll.losses import LossConfig
from icepll.optim import AdamState, adam_step
from icepll.train import EmptyDataset, TrainConfig, train


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState()
    adam_step(params, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])
    assert state.t == 1


def test_adam_first_step_is_lr_times_sign():
    g = np.array([0.3, -5.0, 1e-3, -1e-2])
    params = {"w": np.zeros(4)}
    state = AdamState(lr=1e-3)
    adam_step(params, {"w": g}, state)
    # bias-corrected m/sqrt(v) = g/|g| on the first step, up to eps
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(params["w"]), 1e-3, rtol=1e-5)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(6, 3))
    params = {"w": np.ones(3)}
    state = AdamState(lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    m = v = np.zeros(3)
    w = np.ones(3)
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": g}, state)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(params["w"], w, rtol=1e-13)


def _run_adam(seed):
    rng = np.random.default_rng(seed)
    params = {"a": np.zeros((2, 2)), "b": np.zeros(3)}
    state = AdamState()
    for _ in range(10):
        adam_step(params, {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3)}, state)
    return params


def test_adam_determinism():
    a, b = _run_adam(3), _run_adam(3)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def _two_class_set(n=400, seed=0):
    means = [list(m) for m in data.DEFAULT_MEANS]
    means[0] = [-2.0, -2.0, 0.0]
    means[5] = [2.0, 2.0, 0.0]
    spec = data.SyntheticSpec(
        channel_means=tuple(map(tuple, means)),
        channel_stds=tuple((1.0, 1.0, 1.0) for _ in range(6)),
        class_frequencies=(0.5, 0, 0, 0, 0, 0.5),
        patch_size=8, n_samples=n)
    return data.stack_samples(data.generate_synthetic(spec, seed=seed))


def test_train_separable_two_class():
    arr = _two_class_set()
    net = nn.build_network(seed=0)
    cfg = TrainConfig(epochs=20, batch_size=32, seed=0, loss=LossConfig.cce())
    net, history, _ = train(net, arr.pixels, arr.labels[LabelKind.OneHot], cfg)
    assert len(history) == 20
    assert history[-1].accuracy >= 0.99
    assert np.mean(nn.predict(net, arr.pixels) == arr.truth) >= 0.99


# epoch-mean losses for the first five epochs of the fixture below (seed 0)
GOLDEN_TRACE = [1.0950698968700237, 0.11095730059678097, 0.03351485600264079,
                0.00836309288396669, 0.00312001766047661]


def test_first_epochs_loss_nonincreasing():
    arr = _two_class_set(n=600, seed=1)
    cfg = TrainConfig(epochs=5, batch_size=64, seed=0, loss=LossConfig.focal(0.25, 1))
    _, history, _ = train(nn.build_network(seed=0), arr.pixels, arr.labels[LabelKind.ConfidencePartial], cfg,
                          truth=arr.truth)
    losses = [h.loss for h in history]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses
    np.testing.assert_allclose(losses, GOLDEN_TRACE, rtol=1e-9)


def test_train_determinism():
    arr = _two_class_set(n=200, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=32, seed=5, loss=LossConfig.focal(0.5, 2))
    runs = [train(nn.build_network(seed=1), arr.pixels, arr.labels[LabelKind.ConfidencePartial], cfg)
            for _ in range(2)]
    (n1, h1, _), (n2, h2, _) = runs
    assert n1.checksum() == n2.checksum()
    assert h1 == h2


def test_train_preconditions():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(EmptyDataset):
        train(nn.build_network(seed=0), np.zeros((0, 3, 8, 8)), np.zeros((0, 6)), TrainConfig(epochs=1))


def test_train_config_roundtrip():
    cfg = TrainConfig(epochs=3, batch_size=7, seed=2, loss=LossConfig.focal(0.25, 1, [1, 2, 3, 4, 5, 6]), lr=0.01)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
