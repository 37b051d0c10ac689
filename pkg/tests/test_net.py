import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmirlab.data import Sample
from gmirlab.net import (Checkpoint, ConfigurationError, ModelConfig, forward, grad, init_params,
                         load_checkpoint, loss, per_sample_grads, save_checkpoint, sgd_step)
from oracles import fd_grad, loop_grad


def sample(i, x, y):
    return Sample(i, np.asarray(x, dtype=float), y, "old")


class TestInit:
    def test_parameter_count(self):
        cfg = ModelConfig(input_dim=2, hidden_dims=(3,), num_classes=2)
        assert cfg.num_params == 2 * 3 + 3 + 3 * 2 + 2 == 17
        assert init_params(cfg, 0).shape == (17,)

    def test_default_architecture(self):
        assert ModelConfig().num_params == 2 * 32 + 32 + 32 * 2 + 2

    def test_deterministic(self):
        cfg = ModelConfig()
        assert np.array_equal(init_params(cfg, 5), init_params(cfg, 5))

    def test_seeds_differ(self):
        cfg = ModelConfig()
        assert not np.array_equal(init_params(cfg, 1), init_params(cfg, 2))

    def test_glorot_bounds_and_zero_bias(self):
        cfg = ModelConfig(input_dim=4, hidden_dims=(6,), num_classes=3)
        p = init_params(cfg, 0)
        w1, b1 = p[:24], p[24:30]
        assert np.all(np.abs(w1) <= math.sqrt(6 / 10))
        assert np.all(b1 == 0) and np.all(p[-3:] == 0)

    @pytest.mark.parametrize("bad", [dict(num_classes=1), dict(hidden_dims=(0,)),
                                     dict(activation="gelu")])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigurationError):
            ModelConfig(**bad)


class TestForward:
    def test_zero_network(self):
        cfg = ModelConfig()
        assert np.all(forward(cfg, np.zeros(cfg.num_params), np.array([3.0, -2.0])) == 0)

    def test_hand_computed_2_2_2(self):
        cfg = ModelConfig(input_dim=2, hidden_dims=(2,), num_classes=2)
        # W1 row-major, b1, W2 row-major, b2
        params = np.array([1.0, -1.0, 0.5, 2.0, 0.1, -0.2, 1.0, 2.0, -1.0, 0.5, 0.0, 0.3])
        # hidden: relu([1-0.5+0.1, 0.5+1-0.2]) = [0.6, 1.3]
        # logits: [0.6+2.6, -0.6+0.65+0.3] = [3.2, 0.35]
        np.testing.assert_allclose(forward(cfg, params, [1.0, 0.5]), [3.2, 0.35], atol=1e-14)

    def test_relu_clips_negative_hidden(self):
        cfg = ModelConfig(input_dim=1, hidden_dims=(1,), num_classes=2, activation="relu")
        params = np.array([1.0, 0.0, 1.0, -1.0, 0.0, 0.0])
        assert np.all(forward(cfg, params, [-2.0]) == 0)

    def test_batch_matches_single(self):
        cfg = ModelConfig()
        p = init_params(cfg, 1)
        x = np.random.default_rng(0).normal(size=(5, 2))
        batch = forward(cfg, p, x)
        for i in range(5):
            np.testing.assert_array_equal(forward(cfg, p, x[i]), forward(cfg, p, x[i]))
            np.testing.assert_allclose(batch[i], forward(cfg, p, x[i]), rtol=1e-14)

    def test_dimension_mismatch(self):
        cfg = ModelConfig()
        with pytest.raises(ConfigurationError):
            forward(cfg, init_params(cfg, 0), np.zeros(3))
        with pytest.raises(ConfigurationError):
            forward(cfg, np.zeros(5), np.zeros(2))


class TestLoss:
    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_logits(self, c):
        assert loss(np.full(c, 0.3), 1) == pytest.approx(math.log(c), abs=1e-14)

    def test_saturated(self):
        assert loss(np.array([100.0, 0.0]), 0) < 1e-10

    def test_closed_form(self):
        assert loss(np.array([1.0, 0.0]), 0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss(np.zeros(2), 2)


class TestGrad:
    def test_singleton_equals_loop_oracle(self, small_model):
        p = init_params(small_model, 4)
        s = sample(0, [0.3, -1.2], 1)
        np.testing.assert_allclose(grad(small_model, p, [s]),
                                   loop_grad(small_model, p, s.features, 1), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_differences(self, activation):
        cfg = ModelConfig(input_dim=3, hidden_dims=(5, 4), num_classes=3, activation=activation)
        rng = np.random.default_rng(7)
        for trial in range(5):
            p = init_params(cfg, trial) + rng.normal(0, 0.1, cfg.num_params)
            x, y = rng.normal(size=3), int(rng.integers(3))
            g = grad(cfg, p, [sample(0, x, y)])
            fd = fd_grad(cfg, p, x, y)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)

    def test_pair_is_mean(self, small_model):
        p = init_params(small_model, 2)
        a, b = sample(0, [1.0, 2.0], 0), sample(1, [-0.5, 0.1], 1)
        both = grad(small_model, p, [a, b])
        np.testing.assert_allclose(both, (grad(small_model, p, [a]) + grad(small_model, p, [b])) / 2,
                                   atol=1e-12, rtol=0)

    def test_per_sample_rows(self, small_model):
        p = init_params(small_model, 2)
        x = np.random.default_rng(1).normal(size=(6, 2))
        y = np.array([0, 1, 1, 0, 1, 0])
        G = per_sample_grads(small_model, p, x, y)
        for i in range(6):
            np.testing.assert_allclose(G[i], loop_grad(small_model, p, x[i], y[i]),
                                       rtol=1e-12, atol=1e-15)

    def test_empty_batch(self, small_model):
        with pytest.raises(ValueError):
            grad(small_model, init_params(small_model, 0), [])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12))
    def test_batch_mean_linearity(self, seed, n):
        cfg = ModelConfig(hidden_dims=(6,))
        rng = np.random.default_rng(seed)
        p = init_params(cfg, seed)
        x = rng.normal(size=(n, 2))
        y = rng.integers(0, 2, size=n)
        samples = [sample(i, x[i], int(y[i])) for i in range(n)]
        mean = np.mean([grad(cfg, p, [s]) for s in samples], axis=0)
        np.testing.assert_allclose(grad(cfg, p, samples), mean, atol=1e-12, rtol=0)

    def test_finite_everywhere(self, small_model):
        p = init_params(small_model, 0) * 50
        g = grad(small_model, p, [sample(0, [30.0, -40.0], 1)])
        assert np.all(np.isfinite(g))


class TestSGD:
    def test_arithmetic(self):
        np.testing.assert_allclose(sgd_step(np.array([1.0, 1.0]), np.array([0.5, -0.5]), 0.1),
                                   [0.95, 1.05], atol=1e-15)

    def test_noops(self):
        p = np.array([0.3, -2.0])
        assert np.array_equal(sgd_step(p, np.array([4.0, 1.0]), 0.0), p)
        assert np.array_equal(sgd_step(p, np.zeros(2), 0.7), p)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            sgd_step(np.zeros(3), np.zeros(2), 0.1)


def test_checkpoint_roundtrip_is_exact(tmp_path):
    cfg = ModelConfig(input_dim=3, hidden_dims=(4, 2), num_classes=3, activation="tanh")
    p = init_params(cfg, 9) + np.random.default_rng(0).normal(0, 1e-3, cfg.num_params)
    p[0] = 1 / 3
    ck = Checkpoint(cfg, p, 87.5, 12, {"label": "x"})
    save_checkpoint(tmp_path / "c.json", ck)
    back = load_checkpoint(tmp_path / "c.json")
    assert back.config == cfg
    assert back.params.tobytes() == p.tobytes()
    assert back.best_val_metric == 87.5 and back.epoch == 12


def test_checkpoint_layout_check(tmp_path):
    cfg = ModelConfig()
    save_checkpoint(tmp_path / "c.json", Checkpoint(cfg, init_params(cfg, 0)))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "c.json", expected=ModelConfig(hidden_dims=(16,)))
