import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesnav import nn_core
from bayesnav.errors import ContractError, InputShapeError, NumericDomainError
from bayesnav.nn_core import (EVAL_DROPOUT_OFF, EVAL_DROPOUT_ON, TRAIN_DROPOUT, DenseNet, TrainConfig)


def random_net(rng, max_layers=3, max_units=8, dropout=0.0):
    n_layers = rng.integers(1, max_layers + 1)
    dims = list(rng.integers(1, max_units + 1, size=n_layers + 1))
    net = DenseNet.init(dims, dropout_rate=dropout, rng=rng)
    # nonzero biases keep pre-activations off the ReLU kink
    net.set_params([p if p.ndim == 2 else rng.normal(size=p.shape) for p in net.params()])
    return net


def finite_diff(f, params, eps=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        assert np.all((err <= atol) | (err <= rtol * np.maximum(np.abs(a), np.abs(n)))), (a, n)


# forward ------------------------------------------------------------------

def test_zero_weights_identity_output_is_bias():
    net = DenseNet([np.zeros((3, 2))], [[1.0, -2.0, 0.5]], ["identity"])
    out = net(np.array([4.0, -7.0]))
    np.testing.assert_array_equal(out, [1.0, -2.0, 0.5])


def test_hand_evaluated_relu_layer():
    net = DenseNet([[[2.0]]], [[1.0]], ["relu"])
    np.testing.assert_array_equal(net(np.array([3.0])), [7.0])


def test_zero_dropout_modes_bit_identical():
    rng = np.random.default_rng(0)
    net = DenseNet.init([5, 8, 8, 3], dropout_rate=0.0, rng=rng)
    x = rng.normal(size=5)
    a = net(x, EVAL_DROPOUT_ON, np.random.default_rng(1))
    b = net(x, EVAL_DROPOUT_OFF)
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_input():
    net = DenseNet.init([3, 4, 2], seed=0)
    with pytest.raises(InputShapeError):
        net(np.ones(4))
    with pytest.raises(NumericDomainError):
        net(np.array([1.0, np.nan, 0.0]))


def test_dropout_requires_rng():
    net = DenseNet.init([3, 4, 2], dropout_rate=0.5, seed=0)
    net.rng = None
    with pytest.raises(ContractError):
        nn_core.forward(net, np.ones(3), TRAIN_DROPOUT)


def test_dropout_expectation_matches_dropout_off():
    rng = np.random.default_rng(3)
    net = DenseNet.init([4, 6, 1], dropout_rate=0.3, rng=rng)
    x = rng.normal(size=4)
    # hidden activation after the mask is the first layer's post-dropout output
    n = 20000
    _, cache = nn_core.forward(net, np.broadcast_to(x, (n, 4)), EVAL_DROPOUT_ON, rng)
    hidden_on = cache.inputs[1]
    hidden_off = nn_core.forward(net, x)[1].inputs[1][0]
    se = hidden_on.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(hidden_on.mean(axis=0) - hidden_off) <= 3 * se + 1e-12)


def test_inverted_dropout_scaling():
    net = DenseNet([np.eye(4), np.eye(4)], [np.zeros(4), np.zeros(4)], ["relu", "identity"], dropout_rate=0.5)
    out = net(np.ones(4), TRAIN_DROPOUT, np.random.default_rng(0))
    assert set(np.unique(out)) <= {0.0, 2.0}


# backward -----------------------------------------------------------------

def test_zero_output_grad_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = random_net(rng)
    _, cache = nn_core.forward(net, rng.normal(size=net.n_in))
    for g in nn_core.backward(net, cache, np.zeros(net.n_out)):
        assert not np.any(g)


def test_identity_layer_hand_chain_rule():
    net = DenseNet([[[1.0]]], [[0.0]], ["identity"])
    x, g = 1.7, -0.3
    _, cache = nn_core.forward(net, np.array([x]))
    dW, db = nn_core.backward(net, cache, np.array([g]))
    np.testing.assert_allclose(dW, [[g * x]])
    np.testing.assert_allclose(db, [g])


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.normal(size=(3, net.n_in))
    w = rng.normal(size=(3, net.n_out))

    def loss():
        return float(np.sum(w * net(x)))

    _, cache = nn_core.forward(net, x)
    analytic = nn_core.backward(net, cache, w)
    assert_grads_close(analytic, finite_diff(loss, net.params()))


def test_backward_honours_dropout_masks():
    rng = np.random.default_rng(5)
    net = DenseNet.init([3, 6, 6, 2], dropout_rate=0.4, rng=rng)
    x = rng.normal(size=(2, 3))
    _, cache = nn_core.forward(net, x, TRAIN_DROPOUT, rng)
    masks = cache.masks

    def loss():
        a = x
        for k, (wk, bk, act) in enumerate(zip(net.weights, net.biases, net.activations)):
            a = a @ wk.T + bk
            if act == "relu":
                a = np.maximum(a, 0)
            if masks[k] is not None:
                a = a * masks[k]
        return float(np.sum(a))

    analytic = nn_core.backward(net, cache, np.ones((2, 2)))
    assert_grads_close(analytic, finite_diff(loss, net.params()))


def test_input_grad_matches_finite_differences():
    rng = np.random.default_rng(9)
    net = DenseNet.init([4, 5, 3], rng=rng)
    x = rng.normal(size=4)
    _, cache = nn_core.forward(net, x)
    _, dx = nn_core.backward(net, cache, np.ones(3), input_grad=True)
    num = finite_diff(lambda: float(np.sum(net(x))), [x])[0]
    np.testing.assert_allclose(dx, num, rtol=1e-6, atol=1e-8)


def test_stale_cache_rejected():
    net = DenseNet.init([2, 3, 1], seed=0)
    _, cache = nn_core.forward(net, np.ones(2))
    net.set_params(net.params())
    with pytest.raises(ContractError):
        nn_core.backward(net, cache, np.ones(1))
    other = DenseNet.init([2, 3, 1], seed=0)
    with pytest.raises(ContractError):
        nn_core.backward(other, nn_core.forward(net, np.ones(2))[1], np.ones(1))


# losses -------------------------------------------------------------------

def test_nll_values():
    assert nn_core.heteroscedastic_nll([0.3], [0.0], [0.3]) == 0.0
    assert nn_core.heteroscedastic_nll([0.0], [0.0], [1.0]) == pytest.approx(0.5)
    assert nn_core.heteroscedastic_nll([0.0], [np.log(2)], [np.sqrt(2)]) == pytest.approx(0.5 + 0.5 * np.log(2), abs=1e-12)
    assert nn_core.heteroscedastic_nll([0.0], [np.log(2)], [np.sqrt(2)]) == pytest.approx(0.8466, abs=1e-4)


def test_kl_values():
    assert nn_core.kl_to_standard_normal([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert nn_core.kl_to_standard_normal([1.0], [0.0]) == pytest.approx(0.5)
    assert nn_core.kl_to_standard_normal([0.0], [np.log(4)]) == pytest.approx(0.8069, abs=1e-4)


def test_loss_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        nn_core.heteroscedastic_nll([0.0], [np.inf], [0.0])


@pytest.mark.parametrize("which", ["nll", "kl"])
def test_loss_gradients_match_finite_differences(which):
    rng = np.random.default_rng(11)
    mu, s, y = rng.normal(size=(3, 5, 4))
    if which == "nll":
        f = lambda: nn_core.heteroscedastic_nll(mu, s, y)
        _, d_mu, d_s = nn_core.heteroscedastic_nll_grad(mu, s, y)
    else:
        f = lambda: nn_core.kl_to_standard_normal(mu, s)
        _, d_mu, d_s = nn_core.kl_to_standard_normal_grad(mu, s)
    assert_grads_close([d_mu, d_s], finite_diff(f, [mu, s]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5))
def test_nll_gradient_points_toward_target(mu, s, y):
    _, d_mu, _ = nn_core.heteroscedastic_nll_grad([mu], [s], [y])
    if mu < y:
        assert d_mu[0, 0] < 0
    elif mu > y:
        assert d_mu[0, 0] > 0
    else:
        assert d_mu[0, 0] == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=5), st.data())
def test_kl_non_negative(mu, data):
    s = data.draw(st.lists(st.floats(-4, 4), min_size=len(mu), max_size=len(mu)))
    assert nn_core.kl_to_standard_normal(mu, s) >= 0.0


# adam ---------------------------------------------------------------------

def test_adam_zero_grads_leave_params():
    cfg = TrainConfig()
    params = [np.array([1.0, -2.0])]
    state = nn_core.adam_init(params)
    new, state2 = nn_core.adam_step(params, [np.zeros(2)], state, cfg)
    np.testing.assert_array_equal(new[0], params[0])
    assert state2["step"] == 1


def test_adam_first_step_moves_by_lr_sign():
    cfg = TrainConfig(learning_rate=0.01)
    params = [np.array([0.5, 0.5, 0.5])]
    g = np.array([3.0, -0.2, 0.5])
    new, _ = nn_core.adam_step(params, [g], nn_core.adam_init(params), cfg)
    np.testing.assert_allclose(new[0] - params[0], -0.01 * np.sign(g), atol=1e-9)


def test_adam_decreases_quadratic():
    cfg = TrainConfig(learning_rate=0.1)
    p = [np.array([2.0])]
    state = nn_core.adam_init(p)
    losses = [float(p[0][0] ** 2)]
    for _ in range(2):
        p, state = nn_core.adam_step(p, [2 * p[0]], state, cfg)
        losses.append(float(p[0][0] ** 2))
    assert losses[0] > losses[1] > losses[2]


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(InputShapeError):
        nn_core.adam_step(p, [np.zeros(3)], nn_core.adam_init(p), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)


# persistence --------------------------------------------------------------

def test_weight_roundtrip(tmp_path):
    net = DenseNet.init([3, 5, 2], dropout_rate=0.1, seed=4)
    nn_core.save_net(net, tmp_path / "w.json")
    back = nn_core.load_net(tmp_path / "w.json")
    x = np.array([0.1, -0.4, 2.0])
    assert net(x).tobytes() == back(x).tobytes()
    d = json.loads((tmp_path / "w.json").read_text())
    assert set(d) == {"format_version", "layer_dims", "activations", "dropout_rate", "weights", "biases"}
    assert d["layer_dims"] == [3, 5, 2]


def test_load_rejects_broken_chain(tmp_path):
    d = DenseNet.init([3, 5, 2], seed=4).to_dict()
    d["weights"][1] = np.zeros((2, 4)).tolist()
    with pytest.raises(InputShapeError):
        DenseNet.from_dict(d)
