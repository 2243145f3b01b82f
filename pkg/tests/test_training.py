"""Tests for the loss terms, the Adam implementation, and the train loop."""

import math

import numpy as np
import pytest
import torch

from hails.distributions import ForecastDist
from hails.forecaster import HailsModel, ModelConfig
from hails.hierarchy import build_hierarchy, compute_phi
from hails.sparsity import SparsityLabels
from hails.synth import SynthConfig, generate
from hails.training import (
    AdamState,
    NumericalError,
    TrainConfig,
    adam_step,
    build_subtree_specs,
    dce_metric,
    dcrs_loss_tensor,
    dcrs_subtree,
    dcrs_total,
    evaluate_loss,
    likelihood_loss,
    likelihood_loss_tensor,
    make_windows,
    pretrain,
    train,
)

G = ForecastDist.gaussian_dist
P = ForecastDist.poisson_dist


def labels_for(nodes, sparse):
    sparse = set(sparse)
    return SparsityLabels(
        sparse_set=sparse,
        p_values={n: (0.5 if n in sparse else 0.01) for n in nodes},
    )


class TestDcrsSubtree:
    def test_mixed_worked_example(self):
        # Parent N(5, 2) with Poisson children lambda 2 and 3, unit weights.
        # Moment matching gives aggregate N(5, sqrt(5)):
        # 4/20 + 5/16 - 1/2 = 0.0125.
        val = dcrs_subtree(G(5.0, 2.0), [P(2.0), P(3.0)], [1.0, 1.0])
        assert val == pytest.approx(0.0125, abs=1e-9)

    def test_all_poisson_worked_example(self):
        # JSD kernel: 4*ln(4/2) + 2*ln(2/4) = 2*ln 2.
        val = dcrs_subtree(P(4.0), [P(1.0), P(1.0)], [1.0, 1.0])
        assert val == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_matched_mixed_is_zero(self):
        # Parent exactly matching the moment-matched aggregate costs nothing.
        val = dcrs_subtree(G(5.0, math.sqrt(5.0)), [P(2.0), P(3.0)], [1.0, 1.0])
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_all_gaussian_matched_is_zero(self):
        val = dcrs_subtree(G(3.0, math.sqrt(2.0)), [G(1.0, 1.0), G(2.0, 1.0)], [1.0, 1.0])
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_phi_weights_enter_aggregate(self):
        # With phi = (0.5, 0.5): aggregate mean 2.5, var 0.25 * 5 = 1.25.
        got = dcrs_subtree(G(2.5, math.sqrt(1.25)), [P(2.0), P(3.0)], [0.5, 0.5])
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_poisson_parent_gaussian_child_illegal(self):
        with pytest.raises(ValueError):
            dcrs_subtree(P(3.0), [G(1.0, 1.0), P(2.0)], [1.0, 1.0])

    def test_empty_children_rejected(self):
        with pytest.raises(ValueError):
            dcrs_subtree(G(1.0, 1.0), [], [])


class TestDcrsTotal:
    def test_sums_subtrees_and_averages_steps(self):
        h = compute_phi(build_hierarchy([(1, 2), (1, 3)]), "paper_uniform")
        # phi = (0.5, 0.5) under paper_uniform.
        step0 = {1: G(2.5, math.sqrt(1.25)), 2: P(2.0), 3: P(3.0)}
        step1 = {1: G(5.0, 2.0), 2: P(4.0), 3: P(6.0)}
        dists = {n: [step0[n], step1[n]] for n in (1, 2, 3)}
        per_step1 = dcrs_subtree(step1[1], [step1[2], step1[3]], [0.5, 0.5])
        assert dcrs_total(dists, h) == pytest.approx((0.0 + per_step1) / 2.0, abs=1e-12)
        assert dce_metric(dists, h) == dcrs_total(dists, h)

    def test_requires_phi(self):
        h = build_hierarchy([(1, 2), (1, 3)])
        with pytest.raises(ValueError):
            dcrs_total({1: [G(1, 1)], 2: [G(1, 1)], 3: [G(1, 1)]}, h)


class TestLikelihoodLoss:
    def test_standard_normal_at_mean(self):
        # -log N(0 | 0, 1) = 0.5 * ln(2 pi).
        got = likelihood_loss({1: [G(0.0, 1.0)]}, {1: np.array([0.0])})
        assert got == pytest.approx(0.5 * math.log(2.0 * math.pi), abs=1e-12)

    def test_poisson_zero_count(self):
        # -log P(0 | lambda=2) = 2.
        got = likelihood_loss({1: [P(2.0)]}, {1: np.array([0.0])})
        assert got == pytest.approx(2.0, abs=1e-12)

    def test_sums_over_nodes_and_steps(self):
        dists = {1: [G(0.0, 1.0), G(0.0, 1.0)], 2: [P(2.0), P(2.0)]}
        targets = {1: np.zeros(2), 2: np.zeros(2)}
        got = likelihood_loss(dists, targets)
        assert got == pytest.approx(math.log(2.0 * math.pi) + 4.0, abs=1e-12)


class TestTensorLossesMatchScalar:
    def setup_method(self):
        self.h = compute_phi(build_hierarchy([(1, 2), (1, 3), (3, 4), (3, 5)]))
        self.nodes = [1, 2, 3, 4, 5]
        self.labels = labels_for(self.nodes, sparse={4, 5})
        self.specs = build_subtree_specs(self.h, self.nodes, self.labels)

    def _tensors(self, seed):
        rng = np.random.default_rng(seed)
        tau = 3
        mu = rng.normal(2.0, 0.5, size=(1, 5, tau))
        mu[0, 3:] = rng.uniform(0.5, 3.0, size=(2, tau))  # sparse lambdas
        sigma = rng.uniform(0.3, 2.0, size=(1, 3, tau))  # dense nodes 1, 2, 3
        return torch.from_numpy(mu), torch.from_numpy(sigma)

    def _dists(self, mu, sigma):
        dense_pos = {1: 0, 2: 1, 3: 2}
        out = {}
        for k, n in enumerate(self.nodes):
            if n in (4, 5):
                out[n] = [P(mu[0, k, t].item()) for t in range(mu.shape[2])]
            else:
                d = dense_pos[n]
                out[n] = [
                    G(mu[0, k, t].item(), sigma[0, d, t].item())
                    for t in range(mu.shape[2])
                ]
        return out

    def test_dcrs_tensor_matches_scalar(self):
        for seed in range(5):
            mu, sigma = self._tensors(seed)
            got = float(dcrs_loss_tensor(mu, sigma, self.specs))
            want = dcrs_total(self._dists(mu, sigma), self.h)
            assert got == pytest.approx(want, rel=1e-12)

    def test_likelihood_tensor_matches_scalar(self):
        mu, sigma = self._tensors(0)
        y = np.abs(np.random.default_rng(7).normal(2.0, 1.0, size=(1, 5, 3)))
        y[0, 3:] = np.round(y[0, 3:])
        sparse_mask = torch.tensor([False, False, False, True, True])
        dense_idx = torch.tensor([0, 1, 2])
        got = float(
            likelihood_loss_tensor(mu, sigma, torch.from_numpy(y), sparse_mask, dense_idx)
        )
        targets = {n: y[0, k] for k, n in enumerate(self.nodes)}
        want = likelihood_loss(self._dists(mu, sigma), targets)
        assert got == pytest.approx(want, rel=1e-12)

    def test_dcrs_tensor_batch_mean(self):
        mu0, sig0 = self._tensors(1)
        mu1, sig1 = self._tensors(2)
        batched = float(
            dcrs_loss_tensor(torch.cat([mu0, mu1]), torch.cat([sig0, sig1]), self.specs)
        )
        single = float(dcrs_loss_tensor(mu0, sig0, self.specs)) + float(
            dcrs_loss_tensor(mu1, sig1, self.specs)
        )
        assert batched == pytest.approx(single / 2.0, rel=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
        st = AdamState.for_params(p)
        adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, st, lr=0.1)
        assert torch.equal(p["w"], torch.tensor([1.0, -2.0], dtype=torch.float64))

    def test_first_step_is_signed_lr(self):
        # After bias correction the first update is lr * g / (|g| + eps),
        # i.e. almost exactly lr in the direction opposing the gradient.
        p = {"w": torch.tensor([1.0, 1.0], dtype=torch.float64)}
        st = AdamState.for_params(p)
        adam_step(p, {"w": torch.tensor([3.0, -0.5], dtype=torch.float64)}, st, lr=0.01)
        assert p["w"][0].item() == pytest.approx(1.0 - 0.01, abs=1e-6)
        assert p["w"][1].item() == pytest.approx(1.0 + 0.01, abs=1e-6)

    def test_converges_on_quadratic(self):
        p = {"w": torch.tensor([5.0], dtype=torch.float64)}
        st = AdamState.for_params(p)
        for _ in range(3000):
            g = 2.0 * p["w"].detach()
            adam_step(p, {"w": g}, st, lr=0.01)
        assert abs(p["w"].item()) < 1e-3


class TestSubtreeSpecs:
    def test_illegal_hierarchy_rejected(self):
        h = compute_phi(build_hierarchy([(1, 2), (1, 3)]))
        labels = labels_for([1, 2, 3], sparse={1, 2})  # sparse parent, dense child
        with pytest.raises(ValueError):
            build_subtree_specs(h, [1, 2, 3], labels)

    def test_positions_and_phi(self):
        h = compute_phi(build_hierarchy([(1, 2), (1, 3)]), "paper_uniform")
        specs = build_subtree_specs(h, [1, 2, 3], labels_for([1, 2, 3], sparse={2, 3}))
        assert len(specs) == 1
        s = specs[0]
        assert s.parent_pos == 0 and s.child_pos == [1, 2]
        np.testing.assert_allclose(s.phi, [0.5, 0.5])
        assert not s.parent_sparse and s.child_sparse.all()


class TestWindows:
    def test_split_is_temporal(self):
        values = np.arange(40, dtype=float).reshape(2, 20)
        ws = make_windows(values, None, window=4, horizon=2, val_fraction=0.25)
        n = 20 - 4 - 2 + 1
        assert len(ws.train_idx) + len(ws.val_idx) == n
        assert ws.val_idx.min() > ws.train_idx.max()
        # Targets align with the window end.
        s = int(ws.train_idx[0])
        np.testing.assert_array_equal(ws.targets[s].numpy(), values[:, s + 4 : s + 6])

    def test_too_short_panel_rejected(self):
        with pytest.raises(ValueError):
            make_windows(np.zeros((2, 6)), None, window=4, horizon=2, val_fraction=0.2)


def tiny_setup(seed=0, T=60, gamma=0.5):
    h, panel = generate(SynthConfig(branching=[2], T=T, seed=seed))
    h = compute_phi(h)
    from hails.hierarchy import normalize_panel

    panel = normalize_panel(panel, h)
    labels = labels_for(h.nodes, sparse=set(h.leaves))
    mcfg = ModelConfig(horizon=2, window=8, hidden_size=6)
    model = HailsModel(h.nodes, labels, mcfg, seed=seed)
    tcfg = TrainConfig(
        gamma=gamma, max_epochs=3, pretrain_epochs=2, K=2,
        batch_size=16, seed=seed,
    )
    return h, panel, model, tcfg


class TestPretrain:
    def test_reduces_mean_squared_error(self):
        h, panel, model, tcfg = tiny_setup()
        ws = make_windows(panel.values, None, 8, 2, tcfg.val_fraction)
        with torch.no_grad():
            mu0, _ = model.base_forecasts(ws.inputs[ws.train_idx])
            before = float(((mu0 - ws.targets[ws.train_idx]) ** 2).mean())
        tcfg.pretrain_epochs = 20
        pretrain(model, panel.values, tcfg)
        with torch.no_grad():
            mu1, _ = model.base_forecasts(ws.inputs[ws.train_idx])
            after = float(((mu1 - ws.targets[ws.train_idx]) ** 2).mean())
        assert after < before

    def test_zero_epochs_is_noop(self):
        h, panel, model, tcfg = tiny_setup()
        tcfg.pretrain_epochs = 0
        before = {k: v.clone() for k, v in model.state_dict().items()}
        pretrain(model, panel.values, tcfg)
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_deterministic(self):
        h, panel, model_a, tcfg = tiny_setup(seed=5)
        _, _, model_b, _ = tiny_setup(seed=5)
        pretrain(model_a, panel.values, tcfg)
        pretrain(model_b, panel.values, tcfg)
        for (ka, va), (kb, vb) in zip(
            model_a.state_dict().items(), model_b.state_dict().items()
        ):
            assert ka == kb and torch.equal(va, vb)


class TestTrain:
    def test_reproducible_logs(self):
        h, panel, model_a, tcfg = tiny_setup(seed=3)
        _, _, model_b, _ = tiny_setup(seed=3)
        ra = train(pretrain(model_a, panel.values, tcfg), panel.values, h, tcfg)
        rb = train(pretrain(model_b, panel.values, tcfg), panel.values, h, tcfg)
        assert len(ra.log) == len(rb.log)
        for rowa, rowb in zip(ra.log, rb.log):
            for key in ("ll", "dcrs", "total", "val_total", "dce"):
                assert rowa[key] == rowb[key], key

    def test_log_columns_and_counters(self):
        h, panel, model, tcfg = tiny_setup()
        res = train(model, panel.values, h, tcfg)
        assert all(
            set(row) == {"epoch", "ll", "dcrs", "total", "val_total", "dce"}
            for row in res.log
        )
        assert res.best_epoch >= 0
        assert res.best_val == min(row["val_total"] for row in res.log)
        # K = 2: base updates happen every other batch.
        per_epoch = res.refine_update_steps // len(res.log)
        assert res.base_update_steps == (res.refine_update_steps // tcfg.K)
        assert per_epoch >= 1
        assert len(res.epoch_seconds) == len(res.log)

    def test_k1_updates_every_batch(self):
        h, panel, model, tcfg = tiny_setup()
        tcfg.K = 1
        res = train(model, panel.values, h, tcfg)
        assert res.base_update_steps == res.refine_update_steps

    def test_early_stopping(self):
        h, panel, model, tcfg = tiny_setup()
        tcfg.max_epochs = 60
        tcfg.patience = 2
        res = train(pretrain(model, panel.values, tcfg), panel.values, h, tcfg)
        # Either it ran all epochs improving, or it stopped patience epochs
        # after the best one.
        if len(res.log) < tcfg.max_epochs:
            assert len(res.log) == res.best_epoch + tcfg.patience + 1

    def test_best_state_restored(self):
        h, panel, model, tcfg = tiny_setup()
        tcfg.max_epochs = 8
        res = train(model, panel.values, h, tcfg)
        ws = make_windows(panel.values, None, 8, 2, tcfg.val_fraction)
        specs = build_subtree_specs(h, model.nodes, model.labels)
        val = evaluate_loss(res.model, ws, ws.val_idx, specs, tcfg.gamma)
        assert val.total == pytest.approx(res.best_val, rel=1e-9)

    def test_nonfinite_loss_raises(self):
        h, panel, model, tcfg = tiny_setup()
        with torch.no_grad():
            model.heads.bias.fill_(float("inf"))
        with pytest.raises(NumericalError):
            train(model, panel.values, h, tcfg)

    def test_gamma_zero_drops_dcrs_from_objective(self):
        h, panel, model, tcfg = tiny_setup(gamma=0.0)
        res = train(model, panel.values, h, tcfg)
        for row in res.log:
            assert row["total"] == pytest.approx(row["ll"], rel=1e-12)


class TestTrainConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(K=0)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)
