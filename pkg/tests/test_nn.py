import numpy as np
import pytest

from sfl_lab.nn import (
    AdamState, DenseNet, Layer, NumericError, adam_step, backward, finite_difference_error,
    forward, grad_check, load_net, save_net,
)

from conftest import numeric_grad, rel_err


def test_identity_layer_passes_input_through():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(forward(net, [[1.0, 2.0]]).output, [[1.0, 2.0]])


def test_relu_layer_clamps_at_zero():
    net = DenseNet([Layer(np.eye(2), [-1.0, -1.0], "relu")])
    np.testing.assert_array_equal(net([[0.5, 2.0]]), [[0.0, 1.0]])


def test_forward_matches_straight_line_evaluation(rng):
    net = DenseNet.init([3, 5, 4, 2], ["tanh", "leaky_relu", "identity"], rng)
    x = rng.normal(size=(7, 3))
    (W0, b0), (W1, b1), (W2, b2) = [(l.W, l.b) for l in net.layers]
    expected = np.empty((7, 2))
    for r in range(7):
        h = [np.tanh(sum(x[r, i] * W0[i, j] for i in range(3)) + b0[j]) for j in range(5)]
        h2 = []
        for j in range(4):
            z = sum(h[i] * W1[i, j] for i in range(5)) + b1[j]
            h2.append(z if z > 0 else 0.2 * z)
        expected[r] = [sum(h2[i] * W2[i, j] for i in range(4)) + b2[j] for j in range(2)]
    np.testing.assert_allclose(net(x), expected, rtol=1e-12, atol=1e-12)


def test_forward_rejects_dimension_mismatch(rng):
    net = DenseNet.init([3, 2], "relu", rng)
    with pytest.raises(ValueError):
        forward(net, np.ones((4, 2)))


def test_forward_is_pure(rng):
    net = DenseNet.init([2, 8, 1], ["tanh", "identity"], rng)
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(net(x), net(x))


def test_layers_must_compose():
    with pytest.raises(ValueError):
        DenseNet([Layer(np.ones((2, 3)), np.zeros(3)), Layer(np.ones((2, 1)), np.zeros(1))])


def test_linear_backward_is_outer_product():
    W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    net = DenseNet([Layer(W, np.zeros(2))])
    x = np.array([[1.0, -2.0, 0.5]])
    g = backward(net, forward(net, x), np.ones((1, 2)))
    np.testing.assert_array_equal(g.params[0], np.outer(x[0], np.ones(2)))
    np.testing.assert_array_equal(g.params[1], np.ones(2))
    np.testing.assert_array_equal(g.dx, np.ones((1, 2)) @ W.T)


def test_zero_upstream_gives_zero_gradients(rng):
    net = DenseNet.init([2, 4, 3], ["relu", "tanh"], rng)
    x = rng.normal(size=(3, 2))
    g = backward(net, forward(net, x), np.zeros((3, 3)))
    assert all(np.all(p == 0) for p in g.params)
    assert np.all(g.dx == 0)


def test_backward_rejects_bad_upstream(rng):
    net = DenseNet.init([2, 3], "relu", rng)
    with pytest.raises(ValueError):
        backward(net, forward(net, np.ones((2, 2))), np.ones((2, 2)))


@pytest.mark.parametrize("act", ["relu", "leaky_relu", "tanh", "identity"])
def test_backward_matches_finite_differences(rng, act):
    net = DenseNet.init([3, 6, 5, 2], [act, act, "identity"], rng)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    g = backward(net, forward(net, x), up)

    def loss():
        return float(np.sum(net(x) * up))

    for p, gp in zip(net.parameters(), g.params):
        assert rel_err(gp, numeric_grad(loss, p)) < 1e-4
    assert rel_err(g.dx, numeric_grad(loss, x)) < 1e-4


def test_grad_check_linear_is_exact(rng):
    net = DenseNet.init([4, 3], "identity", rng)
    assert grad_check(net, rng.normal(size=(5, 4)), h=1e-5) < 1e-8


def test_grad_check_tanh_mlp(rng):
    net = DenseNet.init([2, 8, 8, 1], ["tanh", "tanh", "identity"], rng)
    assert grad_check(net, rng.normal(size=(6, 2)), h=1e-5) < 1e-4


def test_grad_check_detects_corrupted_gradient(rng):
    net = DenseNet.init([2, 8, 1], ["tanh", "identity"], rng)
    x = rng.normal(size=(6, 2))
    g = backward(net, forward(net, x), np.ones((6, 1)))
    g.params[0][0, 0] += 0.1
    err = finite_difference_error(net.parameters(), lambda: float(net(x).sum()), g.params, 1e-5)
    assert err > 1e-2


def test_grad_check_rejects_nonpositive_step(rng):
    net = DenseNet.init([2, 1], "identity", rng)
    with pytest.raises(ValueError):
        grad_check(net, np.ones((1, 2)), h=0.0)


def test_adam_zero_gradient_leaves_parameters(rng):
    net = DenseNet.init([2, 3], "relu", rng)
    before = [p.copy() for p in net.parameters()]
    state = AdamState.for_model(net, 1e-3)
    adam_step(net, [np.zeros_like(p) for p in net.parameters()], state)
    assert state.step == 1
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("beta1", [0.0, 0.9])
def test_adam_first_step_closed_form(rng, beta1):
    # bias-corrected first step: m_hat = g, v_hat = g^2, so the move is -lr * g / (|g| + eps)
    net = DenseNet.init([2, 3], "identity", rng)
    before = [p.copy() for p in net.parameters()]
    g = [np.full_like(p, 0.37) for p in net.parameters()]
    state = AdamState.for_model(net, 1e-2, beta1=beta1)
    adam_step(net, g, state)
    for a, b in zip(before, net.parameters()):
        delta = b - a
        np.testing.assert_allclose(delta, -1e-2 * 0.37 / (0.37 + 1e-8), rtol=1e-12)
        assert np.all(np.abs(delta) <= 1e-2)


def test_adam_ascent_flips_displacement(rng):
    # start from zero so the displacement is the update itself, free of rounding in p + delta
    net_a = DenseNet([Layer(np.zeros((3, 2)), np.zeros(2), "relu")])
    net_b = net_a.copy()
    g = [rng.normal(size=p.shape) for p in net_a.parameters()]
    before = [p.copy() for p in net_a.parameters()]
    adam_step(net_a, g, AdamState.for_model(net_a, 1e-3), ascent=False)
    adam_step(net_b, g, AdamState.for_model(net_b, 1e-3), ascent=True)
    for p0, pa, pb in zip(before, net_a.parameters(), net_b.parameters()):
        np.testing.assert_array_equal(pa - p0, -(pb - p0))


def test_adam_rejects_non_finite(rng):
    net = DenseNet.init([2, 3, 1], "relu", rng)
    g = [np.zeros_like(p) for p in net.parameters()]
    g[2][0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        adam_step(net, g, AdamState.for_model(net, 1e-3))
    assert info.value.index == 2


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        net = DenseNet.init([2, 6, 1], ["tanh", "identity"], rng)
        state = AdamState.for_model(net, 1e-2)
        for _ in range(20):
            x = rng.normal(size=(8, 2))
            tr = forward(net, x)
            adam_step(net, backward(net, tr, tr.output - 1.0), state)
        return net.parameters()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    net = DenseNet.init([2, 5, 3], ["leaky_relu", "tanh"], rng)
    save_net(net, tmp_path / "net.npz")
    back = load_net(tmp_path / "net.npz")
    assert [l.act for l in back.layers] == [l.act for l in net.layers]
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
