import math

import numpy as np
import pytest

from mdcausal.nn import (
    AdamState,
    DenseNetwork,
    GaussianHead,
    Layer,
    NonFiniteError,
    adam_step,
    gaussian_log_density,
    load_networks,
    save_networks,
)


def numeric_grads(net, loss, x, h=1e-4):
    """Central differences of ``loss(net(x))`` for every parameter entry."""
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = loss(net.forward(x))
            p[idx] = orig - h
            fm = loss(net.forward(x))
            p[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


class TestForward:
    def test_identity_layer(self):
        net = DenseNetwork([Layer(np.eye(2), np.zeros(2), "identity")])
        np.testing.assert_array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])

    def test_tanh_of_zero_input(self):
        rng = np.random.default_rng(0)
        net = DenseNetwork([Layer(rng.normal(size=(3, 4)), np.zeros(3), "tanh")])
        np.testing.assert_array_equal(net.forward(np.zeros((1, 4))), np.zeros((1, 3)))

    def test_hand_computed_two_layer(self):
        # h = tanh([[1, -1], [0.5, 2]] x + [0, 0.1]); y = [[2, 0], [1, 1]] h + [1, -1]
        net = DenseNetwork([
            Layer(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.1]), "tanh"),
            Layer(np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([1.0, -1.0]), "identity"),
        ])
        x = np.array([[0.3, 0.2]])
        h1, h2 = math.tanh(0.1), math.tanh(0.15 + 0.4 + 0.1)
        expected = [[2 * h1 + 1, h1 + h2 - 1]]
        np.testing.assert_allclose(net.forward(x), expected, rtol=1e-15)

    def test_dimension_mismatch_rejected(self):
        net = DenseNetwork.init([3, 4, 2], rng=0)
        with pytest.raises(ValueError):
            net.forward(np.zeros((5, 2)))

    def test_non_finite_input_rejected(self):
        net = DenseNetwork.init([2, 2], rng=0)
        with pytest.raises(NonFiniteError):
            net.forward(np.array([[np.nan, 0.0]]))

    def test_layers_must_chain(self):
        with pytest.raises(ValueError):
            DenseNetwork([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])

    def test_deterministic(self):
        net = DenseNetwork.init([5, 8, 3], rng=1)
        x = np.random.default_rng(2).normal(size=(7, 5))
        assert np.array_equal(net.forward(x), net.forward(x))

    def test_init_is_glorot_uniform_with_zero_bias(self):
        net = DenseNetwork.init([50, 30], rng=3)
        limit = math.sqrt(6 / 80)
        assert np.all(np.abs(net.layers[0].weight) <= limit)
        assert np.all(net.layers[0].bias == 0)


class TestGaussianLogDensity:
    def test_standard_normal_mode(self):
        head = GaussianHead(np.array([0.0]), np.array([0.0]))
        assert gaussian_log_density(np.array([0.0]), head) == pytest.approx(-0.918939, abs=1e-6)

    def test_one_sd_away(self):
        head = GaussianHead(np.array([0.0]), np.array([0.0]))
        assert gaussian_log_density(np.array([1.0]), head) == pytest.approx(-1.418939, abs=1e-6)

    def test_factorizes_over_coordinates(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x, mu = rng.normal(size=3), rng.normal(size=3)
            var = rng.uniform(0.1, 3.0, size=3)
            one_d = sum(
                -0.5 * math.log(2 * math.pi * v) - (a - m) ** 2 / (2 * v)
                for a, m, v in zip(x, mu, var)
            )
            head = GaussianHead(mu, np.log(var))
            assert gaussian_log_density(x, head) == pytest.approx(one_d, rel=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            gaussian_log_density(np.array([np.inf]), GaussianHead(np.zeros(1), np.zeros(1)))

    def test_head_clamps_log_variance(self):
        head, inside = GaussianHead.from_output(np.array([[0.0, 1.0, -50.0, 3.0]]))
        np.testing.assert_array_equal(head.log_variance, [[-10.0, 3.0]])
        np.testing.assert_array_equal(inside, [[False, True]])
        assert np.all(head.variance > 0)


class TestGradient:
    def test_bias_gradient_of_half_squared_norm(self):
        net = DenseNetwork([Layer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([[1.0, -2.0, 0.5]])
        out, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, out)
        np.testing.assert_array_equal(grads[1], out[0])

    def test_constant_loss_gives_zero_gradients(self):
        net = DenseNetwork.init([3, 4, 2], rng=0)
        out, cache = net.forward_cached(np.ones((2, 3)))
        grads, gin = net.backward(cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(gin == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sizes = [int(rng.integers(1, 9)) for _ in range(3)]
        net = DenseNetwork.init(sizes, rng=rng)
        for layer in net.layers:
            layer.bias += rng.normal(scale=0.5, size=layer.bias.shape)
        x = rng.normal(size=(4, sizes[0]))
        target = rng.normal(size=(4, sizes[-1]))

        def loss(out):
            return float(np.sum(np.sin(out) * target))

        out, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, np.cos(out) * target)
        for g, num in zip(grads, numeric_grads(net, loss, x)):
            assert np.all(np.abs(g - num) / np.maximum(1.0, np.abs(num)) < 1e-5)

    def test_input_gradient(self):
        rng = np.random.default_rng(9)
        net = DenseNetwork.init([3, 5, 2], rng=rng)
        x = rng.normal(size=(1, 3))
        out, cache = net.forward_cached(x)
        _, gin = net.backward(cache, np.ones_like(out))
        h = 1e-6
        for j in range(3):
            e = np.zeros_like(x)
            e[0, j] = h
            num = (net.forward(x + e).sum() - net.forward(x - e).sum()) / (2 * h)
            assert gin[0, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState()
        adam_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert state.step == 1

    def test_moves_against_constant_gradient(self):
        p = [np.zeros(3)]
        g = np.array([1.0, -3.0, 0.2])
        state = AdamState(lr=0.01)
        for _ in range(100):
            adam_step(p, [g], state)
        np.testing.assert_array_equal(np.sign(p[0]), -np.sign(g))

    def test_first_step_magnitude_is_learning_rate(self):
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        g = np.array([0.3, -5.0])
        p = [np.zeros(2)]
        state = AdamState(lr=0.05)
        adam_step(p, [g], state)
        np.testing.assert_allclose(p[0], -0.05 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_accumulators_start_at_zero_and_step_increments(self):
        state = AdamState()
        p = [np.ones((2, 2))]
        adam_step(p, [np.ones((2, 2))], state)
        adam_step(p, [np.ones((2, 2))], state)
        assert state.step == 2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


def test_network_file_round_trip(tmp_path):
    net = DenseNetwork.init([4, 6, 2], rng=5)
    path = tmp_path / "nets.json"
    save_networks(path, {"enc": net}, d=2)
    nets, extra = load_networks(path)
    assert extra == {"d": 2}
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nets["enc"].forward(x), net.forward(x))
