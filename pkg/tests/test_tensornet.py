import numpy as np
import pytest

from retrofit.errors import StaleCacheError, UsageError
from retrofit.tensornet import DenseLayer, Mlp, ParamStore, SetEncoder, SgdConfig, sgd_step

from .conftest import assert_gradient, numerical_gradient


def test_zero_weights_give_zero_output(rng):
    store = ParamStore()
    layer = DenseLayer(store, "l", 4, 3, activation="relu", zero_init=True)
    y, _ = layer.forward(rng.normal(size=(5, 4)))
    np.testing.assert_array_equal(y, np.zeros((5, 3)))


def test_identity_layer():
    store = ParamStore()
    layer = DenseLayer(store, "l", 1, 1)
    layer.weight.value[...] = 1.0
    y, _ = layer.forward(np.array([3.5]))
    assert y[0] == 3.5


def test_input_width_is_checked(rng):
    layer = DenseLayer(ParamStore(), "l", 4, 2, rng=rng)
    with pytest.raises(ValueError):
        layer.forward(np.zeros(3))


def test_mlp_gradients_match_finite_differences(rng):
    store = ParamStore()
    mlp = Mlp(store, "mlp", (3, 5, 4, 2), activation="relu", final="sigmoid", rng=rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))

    def loss():
        return float((mlp.forward(x)[0] * w).sum())

    y, caches = mlp.forward(x)
    dx = mlp.backward(caches, w)
    for _, param in store.items():
        assert_gradient(param.grad, numerical_gradient(loss, param.value), atol=1e-6)
    assert_gradient(dx, numerical_gradient(loss, x), atol=1e-6)


def test_zero_output_gradient_accumulates_nothing(rng):
    store = ParamStore()
    mlp = Mlp(store, "mlp", (3, 4, 2), rng=rng)
    y, caches = mlp.forward(rng.normal(size=(5, 3)))
    mlp.backward(caches, np.zeros_like(y))
    for _, param in store.items():
        assert not param.grad.any()


def test_set_encoder_is_permutation_invariant(rng):
    encoder = SetEncoder(ParamStore(), "enc", output_dim=4, point_widths=(8, 16), rng=rng)
    points = rng.normal(size=(40, 3))
    code = encoder.encode(points)
    for _ in range(5):
        shuffled = points[rng.permutation(len(points))]
        np.testing.assert_allclose(encoder.encode(shuffled), code, rtol=0, atol=1e-12)


def test_set_encoder_gradients_match_finite_differences(rng):
    store = ParamStore()
    encoder = SetEncoder(store, "enc", output_dim=3, point_widths=(5, 6), rng=rng)
    points = rng.normal(size=(10, 3))
    w = rng.normal(size=3)

    def loss():
        return float(encoder.encode(points) @ w)

    code, cache = encoder.forward(points)
    dpoints = encoder.backward(cache, w)
    for _, param in store.items():
        assert_gradient(param.grad, numerical_gradient(loss, param.value), atol=1e-6)
    assert_gradient(dpoints, numerical_gradient(loss, points), atol=1e-6)


def test_max_pool_routes_gradient_to_argmax_rows(rng):
    encoder = SetEncoder(ParamStore(), "enc", output_dim=2, point_widths=(4,), rng=rng)
    points = rng.normal(size=(30, 3))
    _, cache = encoder.forward(points)
    dpoints = encoder.backward(cache, np.ones(2))
    winners = set(cache.argmax.tolist())
    for i in range(len(points)):
        if i not in winners:
            assert not dpoints[i].any()


def test_backward_after_step_is_stale(rng):
    store = ParamStore()
    layer = DenseLayer(store, "l", 2, 2, rng=rng)
    y, cache = layer.forward(np.ones(2))
    sgd_step(store, SgdConfig(lr=0.1))
    with pytest.raises(StaleCacheError):
        layer.backward(cache, np.ones(2))


def test_sgd_single_step():
    store = ParamStore()
    theta = store.add("theta", np.array([1.0]))
    theta.grad[...] = 0.5
    sgd_step(store, SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert theta.value[0] == pytest.approx(0.95)
    assert theta.grad[0] == 0.0
    assert store.version == 1


def test_sgd_converges_on_quadratic_bowl():
    store = ParamStore()
    theta = store.add("theta", np.array([3.0, -2.0]))
    cfg = SgdConfig(lr=0.05, momentum=0.9, weight_decay=0.0)
    for _ in range(500):
        theta.grad[...] = 2.0 * theta.value
        sgd_step(store, cfg)
    assert np.abs(theta.value).max() < 1e-6


def test_sgd_config_validation():
    with pytest.raises(UsageError):
        SgdConfig(lr=0.0)
    with pytest.raises(UsageError):
        SgdConfig(momentum=1.0)
    with pytest.raises(UsageError):
        SgdConfig(weight_decay=-1.0)


def test_store_state_roundtrip_and_checksum(rng):
    store = ParamStore()
    Mlp(store, "m", (3, 4, 2), rng=rng)
    for _, param in store.items():
        param.momentum[...] = 0.25
    other = ParamStore()
    Mlp(other, "m", (3, 4, 2), rng=np.random.default_rng(99))
    assert other.checksum() != store.checksum()

    other.load_state(store.state())
    assert other.checksum() == store.checksum()
    np.testing.assert_array_equal(other["m.0.weight"].momentum, store["m.0.weight"].momentum)


def test_load_state_rejects_shape_mismatch(rng):
    store = ParamStore()
    store.add("a", np.zeros(3))
    with pytest.raises(ValueError):
        store.load_state({"a": np.zeros(4)})
    with pytest.raises(KeyError):
        store.load_state({})


def test_initialisation_is_seeded():
    a, b = ParamStore(), ParamStore()
    SetEncoder(a, "e", 4, (8,), rng=np.random.default_rng(5))
    SetEncoder(b, "e", 4, (8,), rng=np.random.default_rng(5))
    assert a.checksum() == b.checksum()
