import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msdann import nn
from msdann.errors import CacheError, ConfigurationError, LabelError, NumericInputError, ShapeError

from helpers import central_difference, max_relative_error


def _random_net(rng, dims, head="softmax"):
    """Random network with non-zero biases so every parameter is exercised."""
    mlp = nn.init_mlp(dims[0], dims[1:-1], dims[-1], int(rng.integers(1 << 30)), output_activation=head)
    for layer in mlp.layers:
        layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    return mlp


class TestInit:
    def test_deterministic(self):
        a = nn.init_mlp(4, [256, 256], 2, seed=7)
        b = nn.init_mlp(4, [256, 256], 2, seed=7)
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)

    def test_seed_sensitive(self):
        a = nn.init_mlp(4, [256, 256], 2, seed=7)
        b = nn.init_mlp(4, [256, 256], 2, seed=8)
        assert not np.array_equal(a.layers[0].weights, b.layers[0].weights)

    def test_default_shapes(self):
        mlp = nn.init_mlp(3003, [256, 256], 2, seed=0)
        assert [l.weights.shape for l in mlp.layers] == [(256, 3003), (256, 256), (2, 256)]
        assert all(np.all(l.bias == 0) for l in mlp.layers)
        assert [l.activation for l in mlp.layers] == ["relu", "relu", "softmax"]

    def test_glorot_range(self):
        mlp = nn.init_mlp(30, [20], 10, seed=1)
        for layer in mlp.layers:
            limit = math.sqrt(6 / (layer.in_dim + layer.out_dim))
            assert np.abs(layer.weights).max() <= limit

    @pytest.mark.parametrize("args", [(0, [4], 2), (3, [0], 2), (3, [4], -1), (3, [], 2)])
    def test_invalid_dims(self, args):
        with pytest.raises(ConfigurationError):
            nn.init_mlp(*args, seed=0)

    def test_layers_must_chain(self):
        with pytest.raises(ShapeError):
            nn.Mlp([nn.DenseLayer(np.zeros((3, 2)), np.zeros(3)), nn.DenseLayer(np.zeros((2, 4)), np.zeros(2))])


class TestForward:
    def test_identity_layer(self):
        mlp = nn.Mlp([nn.DenseLayer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]])
        out, _ = nn.forward(mlp, x)
        assert np.array_equal(out, x)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(nn.softmax(np.zeros((1, 3))), [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_relu(self):
        mlp = nn.Mlp([nn.DenseLayer(np.eye(2), np.zeros(2), "relu")])
        out, _ = nn.forward(mlp, np.array([[-1.0, 2.0]]))
        assert out.tolist() == [[0.0, 2.0]]

    def test_shape_error(self):
        mlp = nn.init_mlp(4, [3], 2, seed=0)
        with pytest.raises(ShapeError):
            nn.forward(mlp, np.zeros((2, 5)))

    def test_non_finite_input(self):
        mlp = nn.init_mlp(2, [3], 2, seed=0)
        with pytest.raises(NumericInputError):
            nn.forward(mlp, np.array([[np.nan, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(-300, 300)))
    def test_softmax_rows(self, z):
        s = nn.softmax(z)
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


class TestLosses:
    def test_bce_half(self):
        assert nn.bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_perfect(self):
        assert nn.bce_loss([1 - 1e-15], [1]) == pytest.approx(0.0, abs=1e-11)

    def test_bce_sum(self):
        assert nn.bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(-math.log(0.9) - math.log(0.8), rel=1e-14)

    def test_bce_mean(self):
        assert nn.bce_loss([0.9, 0.2], [1, 0], "mean") == pytest.approx(
            (-math.log(0.9) - math.log(0.8)) / 2, rel=1e-14
        )

    def test_bce_label_error(self):
        with pytest.raises(LabelError):
            nn.bce_loss([0.5], [2])

    def test_bce_clamps(self):
        assert math.isfinite(nn.bce_loss([0.0, 1.0], [1, 0]))

    def test_domain_uniform(self):
        probs = np.full((1, 13), 1 / 13)
        d = np.zeros((1, 13))
        d[0, 5] = 1
        assert nn.domain_ce_loss(probs, d) == pytest.approx(math.log(13), abs=1e-12)
        assert math.log(13) == pytest.approx(2.56495, abs=1e-5)

    def test_domain_perfect(self):
        d = np.eye(3)
        assert nn.domain_ce_loss(d, d) == pytest.approx(0.0, abs=1e-11)

    def test_domain_two_rows(self):
        probs = np.array([[0.7, 0.3], [0.4, 0.6]])
        d = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert nn.domain_ce_loss(probs, d) == pytest.approx(-math.log(0.7) - math.log(0.6), rel=1e-14)

    def test_domain_not_one_hot(self):
        with pytest.raises(LabelError):
            nn.domain_ce_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))

    @pytest.mark.parametrize("l_y,l_d,lam,expected", [(0.7, 2.0, 1.0, -1.3), (0.7, 2.0, 0.0, 0.7), (0, 0, 1, 0)])
    def test_total_objective(self, l_y, l_d, lam, expected):
        assert nn.total_objective(l_y, l_d, lam) == pytest.approx(expected, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
    def test_bce_nonnegative(self, rows):
        p, y = zip(*rows)
        assert nn.bce_loss(p, y) >= 0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (6, 4), elements=st.floats(-30, 30)), st.lists(st.integers(0, 3), min_size=6, max_size=6))
    def test_domain_nonnegative(self, z, idx):
        d = np.eye(4)[idx]
        assert nn.domain_ce_loss(nn.softmax(z), d) >= 0


class TestGradReverse:
    def test_negates(self):
        assert nn.grad_reverse(np.array([0.5, -0.2]), 1.0).tolist() == [-0.5, 0.2]

    def test_zero_lambda(self):
        assert np.all(nn.grad_reverse(np.array([[3.0, -1.0]]), 0.0) == 0)

    def test_scaling(self):
        assert nn.grad_reverse(np.array([2.0]), 0.5).tolist() == [-1.0]


class TestBackward:
    def test_zero_upstream(self):
        mlp = nn.init_mlp(4, [5], 3, seed=0)
        out, cache = nn.forward(mlp, np.ones((2, 4)))
        tape = nn.backward(mlp, cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in tape.parameters())
        assert np.all(tape.input_grad == 0)

    def test_linear_layer(self):
        mlp = nn.Mlp([nn.DenseLayer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]])
        out, cache = nn.forward(mlp, x)
        tape = nn.backward(mlp, cache, np.ones_like(out))
        # d(sum of outputs)/dW[o, i] = sum over batch of x[:, i]
        np.testing.assert_array_equal(tape.weights[0], np.tile(x.sum(axis=0), (3, 1)))
        np.testing.assert_array_equal(tape.biases[0], [2.0, 2.0, 2.0])

    def test_stale_cache(self):
        mlp = nn.init_mlp(3, [4], 2, seed=0)
        out, cache = nn.forward(mlp, np.ones((1, 3)))
        tape = nn.backward(mlp, cache, np.ones_like(out))
        nn.optim_step(mlp, tape, nn.OptimConfig(method="sgd"))
        with pytest.raises(CacheError):
            nn.backward(mlp, cache, np.ones_like(out))

    def test_foreign_cache(self):
        a = nn.init_mlp(3, [4], 2, seed=0)
        b = nn.init_mlp(3, [4], 2, seed=0)
        out, cache = nn.forward(a, np.ones((1, 3)))
        with pytest.raises(CacheError):
            nn.backward(b, cache, np.ones_like(out))

    def test_finite_difference_543(self):
        rng = np.random.default_rng(3)
        mlp = _random_net(rng, [4, 3, 2], head="identity")
        x = rng.normal(size=(5, 4))
        target = rng.normal(size=(5, 2))

        def loss():
            out, _ = nn.forward(mlp, x)
            return float(np.sum((out - target) ** 2))

        out, cache = nn.forward(mlp, x)
        tape = nn.backward(mlp, cache, 2 * (out - target))
        numeric = central_difference(loss, mlp.parameters())
        assert max_relative_error(tape.parameters(), numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference_bce(self, seed):
        rng = np.random.default_rng(seed)
        mlp = _random_net(rng, [6, 5, 4, 2])
        x = rng.normal(size=(7, 6))
        y = rng.integers(0, 2, size=7)

        def loss():
            return nn.bce_loss(nn.predict(mlp, x)[:, 1], y)

        probs, cache = nn.forward(mlp, x)
        tape = nn.backward(mlp, cache, nn.label_head_grad(probs, y))
        numeric = central_difference(loss, mlp.parameters())
        assert max_relative_error(tape.parameters(), numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference_domain(self, seed):
        rng = np.random.default_rng(100 + seed)
        mlp = _random_net(rng, [6, 5, 4, 3])
        x = rng.normal(size=(7, 6))
        d = np.eye(3)[rng.integers(0, 3, size=7)]

        def loss():
            return nn.domain_ce_loss(nn.predict(mlp, x), d)

        probs, cache = nn.forward(mlp, x)
        tape = nn.backward(mlp, cache, nn.domain_ce_grad(probs, d))
        numeric = central_difference(loss, mlp.parameters())
        assert max_relative_error(tape.parameters(), numeric) < 1e-4

    def test_input_gradient(self):
        rng = np.random.default_rng(9)
        mlp = _random_net(rng, [4, 5, 3])
        x = rng.normal(size=(3, 4))
        d = np.eye(3)[[0, 2, 1]]

        def loss():
            return nn.domain_ce_loss(nn.predict(mlp, x), d)

        probs, cache = nn.forward(mlp, x)
        tape = nn.backward(mlp, cache, nn.domain_ce_grad(probs, d))
        numeric = central_difference(loss, [x])
        assert max_relative_error([tape.input_grad], numeric) < 1e-4


class TestOptim:
    def _scalar_net(self, w):
        return nn.Mlp([nn.DenseLayer(np.array([[w]]), np.zeros(1), "identity")])

    def test_plain_sgd(self):
        mlp = self._scalar_net(1.0)
        tape = nn.GradTape([np.array([[2.0]])], [np.zeros(1)], np.zeros((1, 1)))
        nn.optim_step(mlp, tape, nn.OptimConfig(method="sgd", learning_rate=0.1))
        assert mlp.layers[0].weights[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_gradient(self):
        mlp = nn.init_mlp(3, [4], 2, seed=1)
        before = [p.copy() for p in mlp.parameters()]
        tape = nn.GradTape([np.zeros_like(l.weights) for l in mlp.layers],
                           [np.zeros_like(l.bias) for l in mlp.layers], np.zeros((1, 3)))
        nn.optim_step(mlp, tape, nn.OptimConfig(), nn.OptimState(mlp))
        assert all(np.array_equal(a, b) for a, b in zip(before, mlp.parameters()))

    def test_momentum(self):
        mlp = self._scalar_net(1.0)
        cfg = nn.OptimConfig(learning_rate=0.1, momentum=0.9)
        state = nn.OptimState(mlp)
        tape = nn.GradTape([np.array([[1.0]])], [np.zeros(1)], np.zeros((1, 1)))
        nn.optim_step(mlp, tape, cfg, state)
        nn.optim_step(mlp, tape, cfg, state)
        # velocities 1 then 1.9
        assert mlp.layers[0].weights[0, 0] == pytest.approx(1.0 - 0.1 - 0.19, abs=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, size=8)
        nets = [nn.init_mlp(3, [4], 2, seed=5) for _ in range(2)]
        for mlp in nets:
            state = nn.OptimState(mlp)
            for _ in range(10):
                probs, cache = nn.forward(mlp, x)
                tape = nn.backward(mlp, cache, nn.label_head_grad(probs, y, "mean"))
                nn.optim_step(mlp, tape, nn.OptimConfig(), state)
        for p, q in zip(nets[0].parameters(), nets[1].parameters()):
            assert np.array_equal(p, q)

    def test_shape_mismatch(self):
        mlp = nn.init_mlp(3, [4], 2, seed=1)
        tape = nn.GradTape([np.zeros((2, 2))], [np.zeros(2)], np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            nn.optim_step(mlp, tape, nn.OptimConfig())

    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"momentum": 1.0}, {"method": "adam"}])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            nn.OptimConfig(**kw)


def test_checkpoint_round_trip_is_bit_exact():
    mlp = nn.init_mlp(7, [5, 4], 3, seed=11)
    mlp.layers[1].bias[:] = np.random.default_rng(0).normal(size=4) / 3
    back = nn.mlp_from_dict(json.loads(json.dumps(nn.mlp_to_dict(mlp))))
    assert [l.activation for l in back.layers] == [l.activation for l in mlp.layers]
    for p, q in zip(mlp.parameters(), back.parameters()):
        assert p.tobytes() == q.tobytes()
