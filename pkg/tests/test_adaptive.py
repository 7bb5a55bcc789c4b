"""Function-preserving growth, pruning, plateau detection and adaptive training."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fnlab import adaptive, netcore
from fnlab.adaptive import (
    Decision,
    GrowthPolicy,
    PruneTracker,
    detect_plateau,
    grow_depth,
    grow_width,
    prune,
    train_adaptive,
)
from fnlab.datagate import LabeledDataset
from fnlab.errors import CapacityExhausted
from fnlab.netcore import EpochRecord, TrainConfig, backprop, build_network, effective_params


def _history(losses, grad=1.0, val=1.0):
    return [EpochRecord(i + 1, v, val, grad, 10) for i, v in enumerate(losses)]


def _xor():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    return LabeledDataset(x, np.array([[0.0], [1.0], [1.0], [0.0]]))


class TestGrowWidth:
    def test_function_unchanged(self):
        net = build_network(2, [8, 8], 1, active=[2, 3], seed=0)
        grown, event = grow_width(net, 0, 3, seed=5)
        assert event.function_drift == 0.0
        assert event.kind == adaptive.WIDTH_GROW and event.count == 3
        assert np.count_nonzero(grown.layers[0].mask) == 5

    def test_new_weights(self):
        net = build_network(2, [8, 8], 1, active=[2, 3], seed=0)
        grown, _ = grow_width(net, 0, 2, seed=5)
        assert not grown.layers[0].weight[2:4].any() and not grown.layers[0].bias[2:4].any()
        outgoing = grown.layers[1].weight[:3, 2:4]
        assert np.all(np.abs(outgoing) <= 0.01) and np.all(outgoing != 0)
        assert not grown.layers[1].weight[3:, 2:4].any()

    def test_param_count_increase(self):
        net = build_network(3, [8, 8], 2, active=[2, 5], seed=0)
        grown, _ = grow_width(net, 0, 3, seed=1)
        # active_fan_in 3, active_fan_out 5
        assert effective_params(grown) - effective_params(net) == 3 * (3 + 1) + 3 * 5

    def test_new_incoming_weights_get_gradient(self):
        net = build_network(1, [2], 1, active=[1], seed=0)
        grown, _ = grow_width(net, 0, 1, seed=0)
        batch = LabeledDataset(np.linspace(-1, 1, 9), np.sin(3 * np.linspace(-1, 1, 9)))
        _, grads = backprop(grown, batch)
        assert np.any(grads[0].weight[1] != 0)

    def test_capacity_exhausted(self):
        net = build_network(1, [2], 1, active=[1], seed=0)
        with pytest.raises(CapacityExhausted):
            grow_width(net, 0, 2, seed=0)

    def test_original_untouched(self):
        net = build_network(1, [4], 1, active=[1], seed=0)
        before = netcore.to_bytes(net)
        grow_width(net, 0, 2, seed=0)
        assert netcore.to_bytes(net) == before


class TestGrowDepth:
    def test_identity_activation(self):
        net = build_network(2, [4], 1, dormant_layers=2, seed=0)
        grown, event = grow_depth(net)
        layer = grown.layers[1]
        assert event.function_drift == 0.0 and event.layer == 1
        assert np.array_equal(layer.weight, np.eye(4)) and not layer.dormant
        assert layer.activation.kind == netcore.PRELU and layer.activation.alpha == 1.0
        assert grown.layers[2].dormant

    def test_param_count_increase(self):
        net = build_network(2, [4], 1, dormant_layers=1, seed=0)
        grown, _ = grow_depth(net)
        assert effective_params(grown) - effective_params(net) == 4 * 4 + 4 + 1

    def test_alpha_gradient_with_negative_preactivation(self):
        net = build_network(1, [3], 1, dormant_layers=1, seed=0)
        grown, _ = grow_depth(net)
        x = np.linspace(-2, 2, 11)
        _, grads = backprop(grown, LabeledDataset(x, x ** 2))
        assert grads[1].alpha != 0.0

    def test_exhausted(self):
        with pytest.raises(CapacityExhausted):
            grow_depth(build_network(1, [3], 1, seed=0))


class TestPrune:
    def _net(self, small):
        net = build_network(1, [2], 1, seed=0)
        net.layers[1].weight[0, 1] = small
        return net

    def test_zero_outgoing_pruned_without_drift(self):
        net = self._net(0.0)
        policy = GrowthPolicy(prune_threshold=1e-6, prune_patience=1)
        out, events = prune(net, policy)
        assert len(events) == 1 and events[0].neuron == 1
        assert events[0].function_drift == 0.0
        assert not out.layers[0].mask[1]

    def test_nothing_under_threshold(self):
        net = self._net(0.5)
        out, events = prune(net, GrowthPolicy(prune_threshold=1e-6, prune_patience=1))
        assert events == [] and out is net

    def test_tiny_weight_drift_is_bounded(self):
        net = self._net(1e-9)
        probe = np.linspace(-1, 1, 1000).reshape(-1, 1)
        _, events = prune(net, GrowthPolicy(prune_threshold=1e-6, prune_patience=1), probe=probe)
        ev = events[0]
        assert ev.function_drift <= ev.drift_bound
        assert ev.function_drift <= 1e-9 * 1.01

    def test_patience(self):
        net = self._net(0.0)
        policy = GrowthPolicy(prune_threshold=1e-6, prune_patience=3)
        tracker = PruneTracker()
        for expected in (0, 0, 1):
            net, events = prune(net, policy, tracker)
            assert len(events) == expected

    def test_keeps_one_neuron(self):
        net = build_network(1, [2], 1, seed=0)
        net.layers[1].weight[:] = 0.0
        out, events = prune(net, GrowthPolicy(prune_threshold=1.0, prune_patience=1))
        assert len(events) == 1 and np.count_nonzero(out.layers[0].mask) == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-8, 1e-2))
    def test_drift_never_exceeds_bound(self, seed, scale):
        rng = np.random.default_rng(seed)
        net = build_network(2, [5, 4], 2, seed=seed, dormant_layers=1)
        net, _ = grow_depth(net)
        net.layers[1].weight[:, 2] *= scale
        net.layers[1].bias[:] = rng.uniform(-1, 1, 4)
        probe = rng.uniform(-1, 1, size=(300, 2))
        _, events = prune(net, GrowthPolicy(prune_threshold=1.0, prune_patience=1), probe=probe)
        for ev in events:
            assert ev.function_drift <= ev.drift_bound * (1 + 1e-12) + 1e-300


class TestDetectPlateau:
    def test_slow_improvement_grows(self):
        policy = GrowthPolicy(rel_improve_threshold=0.01, grad_threshold=0.0, window=3)
        assert detect_plateau(_history([1.0, 0.999, 0.998]), policy) is Decision.GROW_WIDTH

    def test_halving_does_not_grow(self):
        policy = GrowthPolicy(rel_improve_threshold=0.01, grad_threshold=1e-9, window=4)
        assert detect_plateau(_history([8.0, 4.0, 2.0, 1.0]), policy) is Decision.NONE

    def test_zero_gradient_grows(self):
        policy = GrowthPolicy(grad_threshold=1e-3, rel_improve_threshold=0.0, window=2)
        assert detect_plateau(_history([8.0, 1.0], grad=0.0), policy) is Decision.GROW_WIDTH

    def test_target_reached_blocks_growth(self):
        policy = GrowthPolicy(window=2)
        assert detect_plateau(_history([1.0, 1.0], grad=0.0, val=0.0), policy) is Decision.NONE

    def test_short_history(self):
        assert detect_plateau(_history([1.0]), GrowthPolicy(window=2)) is Decision.NONE

    def test_width_then_depth(self):
        policy = GrowthPolicy(window=1)
        hist = _history([1.0], grad=0.0)
        assert detect_plateau(hist, policy, width_available=False) is Decision.GROW_DEPTH
        assert detect_plateau(hist, policy, width_available=False, depth_available=False) is Decision.NONE

    def test_relative_improvement_formula(self):
        assert adaptive.relative_improvement([1.0, 0.999, 0.998]) == pytest.approx(0.002, rel=1e-12)


class TestTrainAdaptive:
    def test_no_growth_policy_matches_plain_training(self):
        x = np.random.default_rng(0).uniform(-1, 1, (40, 1))
        data = LabeledDataset(x, np.sin(3 * x))
        cfg = TrainConfig(epochs=15, batch_size=8, seed=2)
        net = build_network(1, [6], 1, active=[3], seed=1)
        policy = GrowthPolicy(grad_threshold=0.0, rel_improve_threshold=0.0)
        grown, events, log_a = train_adaptive(data, data, net, policy, cfg)
        plain, log_b = netcore.train(net.copy(), data, data, cfg)
        assert events == []
        assert netcore.to_bytes(grown) == netcore.to_bytes(plain)
        assert log_a == log_b

    def test_infinite_target_never_grows(self):
        data = _xor()
        net = build_network(2, [6], 1, active=[1], seed=0)
        policy = GrowthPolicy(grad_threshold=10.0, window=1, target_val_loss=math.inf)
        _, events, _ = train_adaptive(data, data, net, policy, TrainConfig(epochs=10, batch_size=4))
        assert events == []

    def test_xor_grows_and_learns(self):
        data = _xor()
        net = build_network(2, [8], 1, active=[1], seed=0)
        policy = GrowthPolicy(grad_threshold=0.0, rel_improve_threshold=0.05, window=20, width_step=1)
        cfg = TrainConfig(learning_rate=0.05, epochs=400, batch_size=4)
        final, events, log = train_adaptive(data, None, net, policy, cfg)
        assert np.count_nonzero(final.layers[0].mask) >= 2
        assert log[-1].train_loss < log[0].train_loss
        assert all(e.function_drift <= 1e-12 for e in events if e.kind != adaptive.PRUNE)

    def test_replay_is_identical(self):
        data = _xor()
        policy = GrowthPolicy(grad_threshold=0.0, rel_improve_threshold=0.05, window=5)
        cfg = TrainConfig(learning_rate=0.05, epochs=60, batch_size=2)
        runs = [train_adaptive(data, data, build_network(2, [6], 1, active=[1], dormant_layers=1, seed=0),
                               policy, cfg, growth_seed=4) for _ in range(2)]
        assert adaptive.format_growth_log(runs[0][1]) == adaptive.format_growth_log(runs[1][1])
        assert netcore.to_bytes(runs[0][0]) == netcore.to_bytes(runs[1][0])

    def test_capacity_monotone_and_no_dormant_gradients(self):
        data = _xor()
        policy = GrowthPolicy(grad_threshold=0.0, rel_improve_threshold=0.5, window=2, width_step=2,
                              prune_threshold=1e-4, prune_patience=2, max_active_width=6, max_active_depth=2)
        cfg = TrainConfig(learning_rate=0.05, epochs=40, batch_size=4)
        net = build_network(2, [6], 1, active=[1], dormant_layers=1, seed=0)
        final, events, _ = train_adaptive(data, data, net, policy, cfg)
        assert any(e.kind == adaptive.DEPTH_GROW for e in events)
        prev = effective_params(net)
        for e in events:
            if e.kind == adaptive.PRUNE:
                assert e.active_params <= prev
            else:
                assert e.active_params >= prev
            prev = e.active_params
        _, grads = backprop(final, data)
        for layer, g in zip(final.layers, grads):
            if layer.dormant:
                assert g is None
            else:
                assert g.weight.shape == (np.count_nonzero(layer.mask), g.cols.size)

    def test_growth_log_csv(self):
        ev = adaptive.GrowthEvent(3, adaptive.WIDTH_GROW, 0, 2, 0.5, 0.5, 0.0, 17)
        text = adaptive.format_growth_log([ev])
        assert text.splitlines() == ["epoch,kind,layer,count,pre_loss,post_loss,function_drift,active_params",
                                     "3,WidthGrow,0,2,0.5,0.5,0.0,17"]
