from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

import prunekit as pk
from prunekit.data import Dataset
from prunekit.network import (ChannelMask, Network, apply_mask, conv,
                              dense_layer, flatten_layer, save)
from prunekit.pruner import (DivergenceError, PruneConfig, UntrainedBaselineError,
                             budget_for, channel_sensitivity, fine_tune,
                             prune_model, refit_layer, select_channels)
from prunekit.tensor import Tensor


def small_cfg(**kw):
    base = dict(rate=0.5, selection_batches=2, refit_epochs=1, batch_size=16, seed=0)
    base.update(kw)
    return PruneConfig(**base)


class TestChannelSensitivity:
    def test_zero_gradient_gives_zero(self, rng):
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        np.testing.assert_array_equal(channel_sensitivity(w, np.zeros(w.shape)),
                                      np.zeros(3))

    def test_zero_weights_give_zero(self, rng):
        w = Tensor(np.zeros((3, 2, 3, 3)))
        g = rng.standard_normal((3, 2, 3, 3))
        np.testing.assert_array_equal(channel_sensitivity(w, g), np.zeros(3))

    def test_matches_triple_loop_oracle(self, rng):
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        g = rng.standard_normal((3, 2, 3, 3))
        expect = np.zeros(3)
        for k in range(3):
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        expect[k] += (g[k, c, i, j] * w.data[k, c, i, j]) ** 2
        np.testing.assert_allclose(channel_sensitivity(w, g), expect, atol=1e-9)

    def test_nan_gradient_rejected(self, rng):
        w = Tensor(rng.standard_normal((2, 1, 2, 2)))
        g = np.full(w.shape, np.nan)
        with pytest.raises(ValueError, match="NaN"):
            channel_sensitivity(w, g)

    def test_shape_mismatch_rejected(self, rng):
        w = Tensor(rng.standard_normal((2, 1, 2, 2)))
        with pytest.raises(ValueError, match="shape"):
            channel_sensitivity(w, np.zeros((2, 1, 3, 3)))

    def test_loss_scale_covariance(self, rng):
        # scaling the loss by c scales every delta by c^2, set unchanged
        w = Tensor(rng.standard_normal((5, 2, 3, 3)))
        g = rng.standard_normal((5, 2, 3, 3))
        base = channel_sensitivity(w, g)
        scaled = channel_sensitivity(w, 3.0 * g)
        np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-12)
        assert select_channels(base, 3).retained == select_channels(scaled, 3).retained


class TestSelectChannels:
    def test_topk_example(self):
        sel = select_channels(np.array([3.0, 1.0, 2.0]), 2)
        assert sel.retained == [0, 2]
        assert sel.budget == 2

    def test_tie_rule_keeps_lower_index(self):
        sel = select_channels(np.ones(4), 2)
        assert sel.retained == [0, 1]

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError, match="K must be"):
            select_channels(np.ones(3), 0)

    def test_k_above_m_keeps_all(self):
        assert select_channels(np.array([1.0, 2.0]), 5).retained == [0, 1]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exhaustive_enumeration(self, seed):
        r = np.random.default_rng(seed)
        m = int(r.integers(2, 13))
        k = int(r.integers(1, m + 1))
        # quantized values force occasional ties
        delta = r.integers(0, 5, size=m).astype(float)
        best = min(combinations(range(m), k),
                   key=lambda s: (-sum(delta[list(s)]), s))
        assert select_channels(delta, k).retained == list(best)


class TestBudget:
    def test_half_rate_even_channels(self):
        assert budget_for(16, 0.5) == 8

    def test_rounding_half_up(self):
        assert budget_for(16, 0.3) == 11   # 11.2 -> 11
        assert budget_for(16, 0.7) == 5    # 4.8 -> 5
        assert budget_for(15, 0.5) == 8    # 7.5 rounds up

    def test_at_least_one_channel(self):
        assert budget_for(4, 0.99) == 1


def _quadratic_toy():
    """1x1 conv on a single pixel: reconstruction refit is exactly w -= eta*d*x."""
    specs = [conv(1, 1, kernel=1, stride=1, pad=0), flatten_layer(), dense_layer(1, 2)]
    rng = np.random.default_rng(0)
    base = Network.initialize(specs, (1, 1, 1), 2, rng)
    base.params[0]["w"].data[:] = 2.0
    base.params[0]["b"].data[:] = 0.0
    imgs = np.full((1, 1, 1, 1), 0.5)
    labels = np.array([0])
    ds = Dataset(imgs, labels, imgs.copy(), labels.copy(),
                 mean=np.zeros(1), std=np.ones(1), num_classes=2)
    return base, ds


class TestRefitLayer:
    def test_zero_eta_leaves_weights_bit_identical(self, trained_tiny, tiny_dataset):
        cfg = small_cfg(eta=0.0, refit_epochs=2)
        pruned = apply_mask(trained_tiny.copy(),
                            ChannelMask(0, np.array([True, True, False, True])))
        before = {n: t.data.tobytes() for _, n, t in pruned.parameters()}
        refit_layer(trained_tiny, pruned, 0, cfg, tiny_dataset,
                    np.random.default_rng(0))
        after = {n: t.data.tobytes() for _, n, t in pruned.parameters()}
        assert before == after

    def test_single_sgd_step_matches_closed_form(self):
        base, ds = _quadratic_toy()
        pruned = base.copy()
        pruned.params[0]["w"].data[:] = 3.0  # offset from baseline
        pruned = apply_mask(pruned, ChannelMask(0, np.array([True])))
        eta = 0.1
        cfg = PruneConfig(rate=0.5, eta=eta, refit_epochs=1, batch_size=1,
                          enabled_losses=frozenset("r"), selection_batches=1)
        refit_layer(base, pruned, 0, cfg, ds, np.random.default_rng(0))
        # L_r = 0.5*((w-2)*x)^2 with x=0.5 -> grad = (w-2)*x*x = 0.25
        assert pruned.params[0]["w"].item() == pytest.approx(3.0 - eta * 0.25, abs=1e-12)

    def test_requires_mask(self, trained_tiny, tiny_dataset):
        with pytest.raises(pk.pruner.PruneError, match="no mask"):
            refit_layer(trained_tiny, trained_tiny.copy(), 0, small_cfg(),
                        tiny_dataset, np.random.default_rng(0))

    def test_divergence_guard_triggers(self, trained_tiny, tiny_dataset):
        cfg = small_cfg(eta=0.5, refit_epochs=5, divergence_factor=0.01)
        pruned = apply_mask(trained_tiny.copy(),
                            ChannelMask(0, np.array([True, False, False, False])))
        with pytest.raises(DivergenceError, match="diverged"):
            refit_layer(trained_tiny, pruned, 0, cfg, tiny_dataset,
                        np.random.default_rng(0))

    def test_curve_length_matches_epochs(self, trained_tiny, tiny_dataset):
        cfg = small_cfg(refit_epochs=3)
        pruned = apply_mask(trained_tiny.copy(),
                            ChannelMask(0, np.array([True, True, True, False])))
        curve = refit_layer(trained_tiny, pruned, 0, cfg, tiny_dataset,
                            np.random.default_rng(0))
        assert len(curve) == 3
        for bd in curve:
            assert bd.total == pytest.approx(
                bd.l_r + cfg.weights.alpha * bd.l_s + cfg.weights.beta * bd.l_c,
                abs=1e-9)


class TestPruneModel:
    def test_budget_exactness(self, trained_tiny, tiny_dataset):
        final, report = prune_model(trained_tiny, small_cfg(rate=0.5), tiny_dataset)
        kept = {l: len(report.selections[l].retained) for l in report.selections}
        assert kept == {0: budget_for(4, 0.5), 2: budget_for(6, 0.5)}
        assert final.specs[0].out_channels == 2
        assert final.specs[2].out_channels == 3

    def test_determinism(self, trained_tiny, tiny_dataset, tmp_path):
        outs = []
        for run in range(2):
            final, report = prune_model(trained_tiny, small_cfg(seed=3), tiny_dataset)
            path = tmp_path / f"run{run}.prnk"
            save(final, path)
            outs.append((path.read_bytes(), report.to_json()))
        assert outs[0] == outs[1]

    def test_untrained_baseline_rejected(self, tiny_net, tiny_dataset):
        with pytest.raises(UntrainedBaselineError):
            prune_model(tiny_net, small_cfg(), tiny_dataset)

    def test_no_prunable_layers_rejected(self, tiny_dataset):
        rng = np.random.default_rng(0)
        net = Network.initialize(
            [flatten_layer(), dense_layer(3 * 8 * 8, 3)], (3, 8, 8), 3, rng)
        net.meta["trained"] = True
        with pytest.raises(pk.pruner.PruneError, match="no prunable"):
            prune_model(net, small_cfg(), tiny_dataset)

    def test_report_is_populated(self, trained_tiny, tiny_dataset, tmp_path):
        _, report = prune_model(trained_tiny, small_cfg(), tiny_dataset)
        assert report.stats.params_after < report.stats.params_before
        assert report.stats.param_ratio > 1.0
        assert set(report.loss_curves) == {0, 2}
        report.write_loss_curves(tmp_path)
        assert (tmp_path / "layer_0_losses.csv").exists()
        header = (tmp_path / "layer_0_losses.csv").read_text().splitlines()[0]
        assert header == "epoch,l_r,l_s,l_c,total"

    def test_rate_validation(self):
        with pytest.raises(ValueError, match="rate"):
            PruneConfig(rate=1.5)
        with pytest.raises(ValueError, match="rate"):
            PruneConfig(rate=0.0)


class TestFineTune:
    def test_zero_epochs_leaves_network_unchanged(self, trained_tiny, tiny_dataset):
        net = trained_tiny.copy()
        before = {n: t.data.tobytes() for _, n, t in net.parameters()}
        log = fine_tune(net, tiny_dataset, epochs=0)
        assert log == []
        assert {n: t.data.tobytes() for _, n, t in net.parameters()} == before

    def test_loss_decreases_on_separable_toy(self, tiny_dataset, rng):
        from tests.conftest import tiny_specs
        net = Network.initialize(tiny_specs(), tiny_dataset.image_shape, 3, rng)
        log = fine_tune(net, tiny_dataset, epochs=5, eta_schedule=0.02, seed=0)
        assert log[-1]["loss"] < log[0]["loss"]

    def test_eta_schedule_variants(self, trained_tiny, tiny_dataset):
        net = trained_tiny.copy()
        log = fine_tune(net, tiny_dataset, epochs=2,
                        eta_schedule=[0.01, 0.001], seed=0)
        assert [e["eta"] for e in log] == [0.01, 0.001]
        log = fine_tune(net, tiny_dataset, epochs=2,
                        eta_schedule=lambda ep: 0.1 / (1 + ep), seed=0)
        assert log[1]["eta"] == pytest.approx(0.05)
