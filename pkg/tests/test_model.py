import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idkd.errors import InvalidInputError
from idkd.model import (
    LossSpec,
    MlpModel,
    average_models,
    backward,
    cross_entropy,
    forward,
    init_mlp,
    kd_loss,
    softmax_with_temperature,
)

from oracles import central_difference, reference_loss, straight_line_forward


def random_model(seed, dims=(6, 8, 5, 4), activation="tanh"):
    return init_mlp(dims, np.random.default_rng(seed), activation)


def test_zero_model_gives_zero_logits():
    model = MlpModel((5, 7, 3))
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.array_equal(forward(model, x), np.zeros((4, 3), dtype=np.float32))


def test_identity_layer_maps_one_hot_to_itself():
    model = MlpModel((4, 4))
    model.weights[0][...] = np.eye(4)
    x = np.eye(4)[[2]]
    np.testing.assert_array_equal(forward(model, x), x)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_straight_line_recompute(activation):
    model = random_model(3, (5, 6, 4, 3), activation)
    for b in model.biases:
        b[...] = np.random.default_rng(9).uniform(-0.5, 0.5, size=b.shape)
    x = np.random.default_rng(4).standard_normal((7, 5))
    expected = straight_line_forward(model.weights, model.biases, x, activation)
    np.testing.assert_allclose(forward(model, x), expected, rtol=1e-5, atol=1e-5)


def test_forward_rejects_wrong_width():
    with pytest.raises(InvalidInputError):
        forward(MlpModel((3, 2)), np.zeros((2, 4)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_with_temperature(np.full(7, 3.2), 5.0), np.full(7, 1 / 7))
    z = np.array([4.0, -3.0, 10.0, 0.5])
    np.testing.assert_allclose(softmax_with_temperature(z, 1e6), np.full(4, 0.25), atol=1e-4)
    e2 = np.exp(2.0) / (np.exp(2.0) + 1.0)
    np.testing.assert_allclose(softmax_with_temperature(np.array([2.0, 0.0]), 1.0), [e2, 1 - e2], atol=1e-12)
    np.testing.assert_allclose(softmax_with_temperature(np.array([2.0, 0.0]), 1.0), [0.8808, 0.1192], atol=1e-3)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_tau(tau):
    with pytest.raises(InvalidInputError):
        softmax_with_temperature(np.zeros(3), tau)


finite_logits = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(z=finite_logits, tau=st.floats(1e-2, 1e3), shift=st.floats(-100, 100))
def test_softmax_properties(z, tau, shift):
    p = softmax_with_temperature(z, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-5
    np.testing.assert_allclose(softmax_with_temperature(z + shift, tau), p, atol=1e-5)
    # floating-point monotonicity: the top logit always keeps the top probability
    assert p[np.argmax(z)] == p.max()


def test_cross_entropy_examples():
    z = np.zeros((3, 10))
    loss, _ = cross_entropy(z, np.array([0, 4, 9]))
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    z = np.array([[30.0, 0.0, 0.0]])
    assert cross_entropy(z, np.array([0]))[0] < 1e-10
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy(z, y)
    coords = list(range(z.size))
    fd = central_difference(lambda v: reference_loss(v.reshape(z.shape), labels=y), z.ravel(), coords, 1e-5)
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-5, atol=1e-9)


def test_kd_fixed_point_has_zero_gradient():
    z = np.random.default_rng(2).standard_normal((4, 6))
    t = softmax_with_temperature(z, 3.0)
    _, g = kd_loss(z, t, 3.0)
    np.testing.assert_allclose(g, 0, atol=1e-12)


def test_kd_with_one_hot_and_unit_tau_is_cross_entropy():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    l1, g1 = kd_loss(z, np.eye(5)[y], 1.0)
    l2, g2 = cross_entropy(z, y)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


@pytest.mark.parametrize("tau", [1.0, 10.0])
def test_kd_gradient_matches_finite_differences(tau):
    rng = np.random.default_rng(7)
    z = rng.standard_normal((4, 5)) * 3
    t = softmax_with_temperature(rng.standard_normal((4, 5)), 1.0)
    _, g = kd_loss(z, t, tau)
    fd = central_difference(lambda v: reference_loss(v.reshape(z.shape), soft=t, tau=tau), z.ravel(),
                            list(range(z.size)), 1e-5)
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-5, atol=1e-9)


def test_kd_rejects_malformed_teacher():
    with pytest.raises(InvalidInputError):
        kd_loss(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.5]]), 1.0)
    with pytest.raises(InvalidInputError):
        kd_loss(np.zeros((1, 2)), np.array([[1.5, -0.5]]), 1.0)


def _param_fd(model, x, spec, coords, h):
    m64 = model.astype(np.float64)

    def f(p):
        m64.params[...] = p
        z = straight_line_forward(m64.weights, m64.biases, x, m64.activation)
        out = reference_loss(z, spec.labels, spec.soft, spec.soft_mask, spec.tau, spec.kd_weight)
        return out + 0.5 * spec.weight_decay * float(p @ p)

    return central_difference(f, model.params.astype(np.float64), coords, h)


@pytest.mark.parametrize("kind", ["ce", "kd1", "kd10", "mixed", "pool"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    model = random_model(11, (4, 5, 3))
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    t = softmax_with_temperature(rng.standard_normal((6, 3)) * 2, 1.0)
    spec = {
        "ce": LossSpec(labels=y, weight_decay=1e-3),
        "kd1": LossSpec(soft=t, tau=1.0),
        "kd10": LossSpec(soft=t, tau=10.0),
        "mixed": LossSpec(labels=y, soft=t, tau=4.0, kd_weight=0.3),
        "pool": LossSpec(labels=np.where(np.arange(6) < 3, y, -1), soft=t,
                         soft_mask=np.arange(6) >= 3, tau=10.0),
    }[kind]
    _, grad = backward(model, x, spec)
    coords = list(range(model.parameter_count()))
    fd = _param_fd(model, x, spec, coords, 1e-5)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-5)


def test_zero_kd_weight_equals_pure_cross_entropy():
    rng = np.random.default_rng(3)
    model = random_model(3)
    x = rng.standard_normal((5, 6))
    y = rng.integers(0, 4, 5)
    t = softmax_with_temperature(rng.standard_normal((5, 4)), 1.0)
    a = backward(model, x, LossSpec(labels=y))
    b = backward(model, x, LossSpec(labels=y, soft=t, kd_weight=0.0, tau=2.0))
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_zero_model_symmetric_data_gives_equal_bias_gradients():
    model = MlpModel((2, 3, 2), "relu")
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    _, grad = backward(model, x, LossSpec(labels=np.array([0, 1])))
    _, biases = model.split(grad)
    assert biases[-1][0] == biases[-1][1]


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(8)
    model = random_model(8, (6, 16, 4), "relu")
    x = rng.standard_normal((32, 6))
    y = rng.integers(0, 4, 32)
    runs = [backward(model, x, LossSpec(labels=y, weight_decay=1e-4)) for _ in range(3)]
    for loss, g in runs[1:]:
        assert loss == runs[0][0]
        assert g.tobytes() == runs[0][1].tobytes()


def test_parameter_count_and_shapes():
    model = MlpModel((10, 256, 256, 10))
    assert model.parameter_count() == 10 * 256 + 256 + 256 * 256 + 256 + 256 * 10 + 10
    assert [w.shape for w in model.weights] == [(256, 10), (256, 256), (10, 256)]


def test_glorot_bounds():
    model = init_mlp((20, 30, 5), np.random.default_rng(0))
    for w in model.weights:
        limit = np.sqrt(6 / (w.shape[0] + w.shape[1]))
        assert np.abs(w).max() <= limit
    assert all(np.all(b == 0) for b in model.biases)


def test_average_models():
    a = random_model(0)
    b = a.with_params(-a.params)
    assert np.all(average_models([a, b]).params == 0)
    assert np.array_equal(average_models([a, a.copy()]).params, a.params)
