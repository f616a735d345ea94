import math

import numpy as np
import pytest

from eosprobe.autodiff import Tensor, grad
from eosprobe.autodiff import tensor as T
from eosprobe.data import LabeledDataset
from eosprobe.models import (Conv, Dense, Flatten, MaxPool, ModelLoss, ModelSpec, forward,
                             init_kaiming, per_example_ce, softmax_ce, tiny_conv, tiny_mlp)
from eosprobe.autodiff import eval_loss

from conftest import mlp_preactivations


# -- init ---------------------------------------------------------------------

def test_kaiming_relu_std():
    spec = ModelSpec((100,), (Dense(100, 10),), "relu", 10, seed=3)
    theta = init_kaiming(spec)
    w = theta[:1000]
    assert abs(w.std() / math.sqrt(2 / 100) - 1) < 0.10


def test_kaiming_tanh_gain():
    spec = ModelSpec((400,), (Dense(400, 50),), "tanh", 50, seed=1)
    w = init_kaiming(spec)[:20000]
    assert abs(w.std() / (5 / 3 / math.sqrt(400)) - 1) < 0.05


def test_kaiming_conv_fan_in():
    spec = ModelSpec((3, 9, 9), (Conv(3, 40, 5), Flatten(), Dense(40 * 25, 2)), "relu", 2, seed=2)
    start, stop, shape, _ = spec.param_slices()[0]
    w = init_kaiming(spec)[start:stop]
    assert shape == (40, 75)
    assert abs(w.std() / math.sqrt(2 / 75) - 1) < 0.10


def test_kaiming_deterministic_and_zero_biases():
    spec = tiny_mlp(6, 3, (5, 4), "relu", seed=9)
    a, b = init_kaiming(spec), init_kaiming(spec)
    assert a.tobytes() == b.tobytes()
    for start, stop, shape, _ in spec.param_slices():
        if len(shape) == 1:
            assert np.all(a[start:stop] == 0.0)
    assert init_kaiming(tiny_mlp(6, 3, (5, 4), "relu", seed=10)).tobytes() != a.tobytes()


# -- forward ------------------------------------------------------------------

def test_zero_theta_gives_zero_logits():
    spec = tiny_conv((1, 12, 12), 4, channels=(2, 3), kernel=3, hidden=5)
    np.testing.assert_array_equal(forward(spec, np.zeros(spec.n_params), np.ones(144)), 0.0)


def test_identity_dense_net():
    spec = ModelSpec((2,), (Dense(2, 2),), "relu", 2)
    theta = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(forward(spec, theta, [1.0, 2.0]), [1.0, 2.0])


def test_linear_net_doubles_logits():
    spec = ModelSpec((3,), (Dense(3, 4),), "tanh", 4)
    theta = np.random.default_rng(0).standard_normal(spec.n_params)
    theta[-4:] = 0.0
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(forward(spec, theta, 2 * x), 2 * forward(spec, theta, x), rtol=1e-14)


def test_forward_matches_independent_reference(reference):
    for fx, spec, theta, data in reference:
        z = forward(spec, theta, data.inputs)
        np.testing.assert_allclose(z, fx["logits"], rtol=1e-12, atol=1e-13, err_msg=fx["name"])


def test_forward_matches_plain_numpy_mlp():
    rng = np.random.default_rng(4)
    spec = tiny_mlp(5, 3, (7, 6), "tanh", seed=1)
    theta = rng.standard_normal(spec.n_params)
    x = rng.standard_normal((9, 5))
    h = np.tanh(mlp_preactivations(spec, theta, x)[-1])
    W = theta[-(6 * 3 + 3):-3].reshape(6, 3)
    np.testing.assert_allclose(forward(spec, theta, x), h @ W + theta[-3:], rtol=1e-13)


def test_forward_rejects_shape_mismatch():
    spec = tiny_mlp(4, 2, (3,))
    with pytest.raises(ValueError):
        forward(spec, np.zeros(spec.n_params), np.zeros(5))
    with pytest.raises(ValueError):
        forward(spec, np.zeros(spec.n_params + 1), np.zeros(4))


def test_single_and_batch_forward_agree():
    spec = tiny_mlp(4, 3, (6,), seed=2)
    theta = init_kaiming(spec)
    x = np.random.default_rng(1).standard_normal((3, 4))
    batch = forward(spec, theta, x)
    for i in range(3):
        np.testing.assert_allclose(forward(spec, theta, x[i]), batch[i], rtol=1e-14)


# -- spec ---------------------------------------------------------------------

def test_spec_text_round_trip():
    spec = tiny_conv((3, 16, 16), 5, channels=(4, 6), kernel=3, hidden=8, activation="tanh", seed=7)
    text = spec.to_text()
    again = ModelSpec.from_text(text)
    assert again == spec
    assert again.to_text() == text
    assert init_kaiming(again).tobytes() == init_kaiming(spec).tobytes()


def test_spec_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ModelSpec((4,), (Dense(4, 3), Dense(2, 2)), "relu", 2)
    with pytest.raises(ValueError):
        ModelSpec((4,), (Dense(4, 3),), "relu", 2)
    with pytest.raises(ValueError):
        ModelSpec((4,), (Dense(4, 2),), "sigmoid", 2)
    with pytest.raises(ValueError):
        ModelSpec((1, 4, 4), (Conv(1, 2, 5), Flatten(), Dense(2, 2)), "relu", 2)


def test_tiny_conv_default_is_cifar_shaped():
    spec = tiny_conv()
    assert spec.input_shape == (3, 32, 32) and spec.n_c == 10
    assert isinstance(spec.layers[1], MaxPool)


# -- criterion ----------------------------------------------------------------

def test_softmax_ce_uniform_logits():
    assert softmax_ce(np.zeros(10), 3) == pytest.approx(math.log(10), rel=1e-15)
    assert softmax_ce(np.zeros(10), 3) == pytest.approx(2.302585, abs=1e-6)


def test_softmax_ce_no_overflow():
    assert softmax_ce([0.0, 1000.0], 0) == 1000.0


def test_softmax_ce_closed_form():
    assert softmax_ce([3.0, 1.0], 0) == pytest.approx(math.log(1 + math.exp(-2)), rel=1e-15)
    assert softmax_ce([3.0, 1.0], 0) == pytest.approx(0.126928, abs=1e-6)


def test_softmax_ce_label_range():
    with pytest.raises(ValueError):
        softmax_ce([1.0, 2.0], 2)


def test_softmax_ce_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z = rng.standard_normal(5) * 10
        assert softmax_ce(z, int(rng.integers(5))) >= 0


def test_ce_gradient_wrt_logits_sums_to_zero():
    z = Tensor(np.random.default_rng(1).standard_normal((4, 6)), requires_grad=True)
    (g,) = grad(T.sum_(per_example_ce(z, np.array([0, 5, 2, 2]))), [z])
    np.testing.assert_allclose(g.data.sum(axis=1), 0.0, atol=1e-15)


def test_uniform_logit_network_loss_is_ln10():
    spec = tiny_mlp(3, 10, (4,), "relu", seed=0)
    theta = init_kaiming(spec)
    start = spec.param_slices()[-2][0]
    theta[start:] = 0.0
    x = np.random.default_rng(0).standard_normal((7, 3))
    data = LabeledDataset(x, np.arange(7) % 10, 10)
    assert eval_loss(ModelLoss(spec), theta, data) == pytest.approx(math.log(10), rel=1e-14)


def test_saturated_example_loss_tiny():
    spec = ModelSpec((2,), (Dense(2, 2),), "relu", 2)
    theta = np.array([1000.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    data = LabeledDataset(np.array([[1.0, 0.0]]), np.array([0]), 2)
    assert eval_loss(ModelLoss(spec), theta, data) < 1e-12


def test_model_loss_checks_class_count():
    spec = tiny_mlp(2, 3, (2,))
    data = LabeledDataset(np.zeros((2, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        eval_loss(ModelLoss(spec), init_kaiming(spec), data)
