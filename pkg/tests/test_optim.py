"""Optimizer family: streaming losses, trend, weights, steps, training."""

import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from tdro.model import Batch, get_flat_params, init_model, num_params
from tdro.optim import (TdroConfig, TdroState, erm_step, group_dro_step,
                        group_scores, load_state, sample_negatives,
                        save_state, shifting_trend, stream_update, tdro_step,
                        train, weight_update)


class TestStreamUpdate:
    def test_hand_value(self):
        assert stream_update(1.0, 0.5, 0.2) == pytest.approx(0.9, abs=1e-15)

    def test_mu_one_replaces(self):
        assert stream_update(3.0, 0.5, 1.0) == 0.5

    def test_elementwise_on_arrays(self):
        prev = np.array([1.0, 2.0])
        new = np.array([0.0, 4.0])
        out = stream_update(prev, new, 0.5)
        assert np.allclose(out, [0.5, 3.0], rtol=1e-15)


class TestShiftingTrend:
    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        K, E, P = 3, 4, 7
        cell = rng.normal(size=(K, E, P))
        beta = rng.random(E) + 0.5
        expected = np.zeros(P)
        for e in range(E):
            for i in range(K):
                expected = expected + beta[e] * cell[i, e]
        assert np.allclose(shifting_trend(cell, beta), expected, rtol=1e-12)

    def test_zero_cells_give_zero(self):
        assert np.array_equal(shifting_trend(np.zeros((2, 3, 5)), np.ones(3)),
                              np.zeros(5))

    def test_beta_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            shifting_trend(np.zeros((2, 3, 5)), np.ones(4))


class TestGroupScores:
    def test_matches_literal_formula(self):
        rng = np.random.default_rng(1)
        K, P = 4, 9
        losses = rng.random(K)
        grads = rng.normal(size=(K, P))
        trend = rng.normal(size=P)
        lam = 0.3
        got = group_scores(losses, grads, trend, lam)
        for j in range(K):
            expected = (1 - lam) * losses[j] + lam * float(grads[j] @ trend)
            assert got[j] == pytest.approx(expected, rel=1e-12)

    def test_lambda_zero_is_pure_loss(self):
        rng = np.random.default_rng(2)
        losses = rng.random(3)
        got = group_scores(losses, rng.normal(size=(3, 5)),
                           rng.normal(size=5), 0.0)
        assert np.allclose(got, losses, rtol=1e-15)

    def test_lambda_one_is_pure_trend(self):
        rng = np.random.default_rng(3)
        grads = rng.normal(size=(3, 5))
        trend = rng.normal(size=5)
        got = group_scores(rng.random(3), grads, trend, 1.0)
        assert np.allclose(got, grads @ trend, rtol=1e-12)

    def test_normalized_gradients_are_cosines(self):
        grads = np.array([[3.0, 4.0], [0.0, 0.0]])
        trend = np.array([0.0, 2.0])
        got = group_scores(np.zeros(2), grads, trend, 1.0,
                           normalize_gradients=True)
        assert got[0] == pytest.approx(0.8, rel=1e-12)  # cos against +y
        assert got[1] == 0.0  # zero gradient stays zero

    def test_drop_worst_case_keeps_only_trend(self):
        rng = np.random.default_rng(4)
        losses = rng.random(3) + 10.0
        grads = rng.normal(size=(3, 5))
        trend = rng.normal(size=5)
        got = group_scores(losses, grads, trend, 0.3, drop_worst_case=True)
        assert np.allclose(got, 0.3 * (grads @ trend), rtol=1e-12)

    def test_restrict_limits_inner_product(self):
        grads = np.array([[1.0, 10.0, 2.0]])
        trend = np.array([1.0, 100.0, 1.0])
        got = group_scores(np.zeros(1), grads, trend, 1.0,
                           restrict=slice(0, 1))
        assert got[0] == pytest.approx(1.0, rel=1e-12)


def kl_objective(w_new, w_old, c, eta_w):
    """The exponentiated-update objective: sum w'c - KL(w'||w)/eta_w."""
    return float(w_new @ c - (w_new @ np.log(w_new / w_old)) / eta_w)


class TestWeightUpdate:
    def test_hand_evaluated_two_groups(self):
        w = weight_update(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1.0)
        e = np.exp(1.0)
        assert np.allclose(w, [e / (1 + e), 1 / (1 + e)], rtol=1e-15)

    def test_eta_zero_keeps_weights(self):
        w0 = np.array([0.25, 0.75])
        assert np.array_equal(weight_update(w0, np.array([5.0, -3.0]), 0.0),
                              w0)

    def test_equal_scores_keep_weights(self):
        w0 = np.array([0.125, 0.375, 0.5])
        w = weight_update(w0, np.full(3, 2.0), 0.7)
        assert np.allclose(w, w0, rtol=1e-15)

    def test_huge_scores_do_not_overflow(self):
        w = weight_update(np.array([0.5, 0.5]), np.array([5000.0, 0.0]), 1.0)
        assert np.all(np.isfinite(w))
        assert w[0] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.filterwarnings(
        "ignore:Values in x were outside bounds:RuntimeWarning")
    def test_maximizes_kl_regularized_objective(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        w_old = rng.random(k) + 0.05
        w_old /= w_old.sum()
        c = rng.normal(size=k) * 2.0
        eta_w = float(rng.uniform(0.05, 2.0))
        ours = weight_update(w_old, c, eta_w)

        res = minimize(
            lambda w: -kl_objective(np.clip(w, 1e-12, None), w_old, c, eta_w),
            w_old, method="SLSQP",
            bounds=[(1e-12, 1.0)] * k,
            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0}],
            options={"maxiter": 500, "ftol": 1e-14})
        ours_obj = kl_objective(ours, w_old, c, eta_w)
        slsqp_obj = kl_objective(np.clip(res.x, 1e-12, None), w_old, c, eta_w)
        assert ours_obj >= slsqp_obj - 1e-8

    @given(st.integers(2, 6), st.integers(0, 10_000),
           st.floats(0.01, 3.0))
    @settings(max_examples=60, deadline=None)
    def test_simplex_and_shift_invariance(self, k, seed, eta_w):
        rng = np.random.default_rng(seed)
        w_old = rng.random(k) + 0.01
        w_old /= w_old.sum()
        c = rng.normal(size=k) * 3.0
        w = weight_update(w_old, c, eta_w)
        assert np.all(w >= 0.0)
        assert abs(w.sum() - 1.0) <= 1e-12
        shifted = weight_update(w_old, c + 7.25, eta_w)
        assert np.allclose(w, shifted, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_higher_score_grows_weight_ratio(self, seed):
        rng = np.random.default_rng(seed)
        w_old = np.full(2, 0.5)
        c = np.sort(rng.normal(size=2))
        w = weight_update(w_old, c, 1.0)
        assert w[1] >= w[0]


def toy_problem(num_groups=3, num_periods=2, seed=0):
    num_users, num_items, d_feat = 5, 9, 4
    warm = np.arange(8)
    model = init_model(num_users, num_items, warm, d_feat, d=3, h=4,
                       seed=seed)
    rng = np.random.default_rng(seed + 50)
    features = rng.normal(size=(num_items, d_feat))
    n = 16
    batch = Batch(users=rng.integers(num_users, size=n),
                  pos_items=rng.integers(8, size=n),
                  neg_items=rng.integers(8, size=n),
                  groups=rng.integers(num_groups, size=n),
                  periods=rng.integers(num_periods, size=n))
    state = TdroState.initial(num_groups, num_periods, num_params(model))
    beta = np.exp(0.2 * np.arange(1, num_periods + 1))
    return model, features, batch, state, beta


class TestSteps:
    def test_tdro_step_keeps_weights_on_simplex(self):
        model, feats, batch, state, beta = toy_problem()
        cfg = TdroConfig(mode="tdro", K=3, E=2, eta=0.5)
        for _ in range(30):
            tdro_step(model, batch, state, cfg, feats, beta)
        assert np.all(state.w >= 0.0)
        assert abs(state.w.sum() - 1.0) <= 1e-12
        assert np.all(np.isfinite(state.stream_loss))
        assert state.step == 30

    def test_tdro_single_group_matches_erm_exactly(self):
        model_a, feats, batch, state, beta = toy_problem(num_groups=1)
        batch = Batch(users=batch.users, pos_items=batch.pos_items,
                      neg_items=batch.neg_items,
                      groups=np.zeros(len(batch), dtype=np.int64),
                      periods=batch.periods)
        model_b = copy.deepcopy(model_a)
        cfg = TdroConfig(mode="tdro", K=1, E=2, eta=0.7)
        tdro_step(model_a, batch, state, cfg, feats, beta)
        erm_step(model_b, batch, TdroConfig(mode="erm", eta=0.7), feats)
        assert np.array_equal(get_flat_params(model_a),
                              get_flat_params(model_b))

    def test_group_dro_descends_worst_streaming_group(self):
        model, feats, batch, state, beta = toy_problem()
        state.stream_loss[:] = [0.1, 5.0, 0.2]
        cfg = TdroConfig(mode="group_dro", K=3, E=2, eta=0.5)
        group_dro_step(model, batch, state, cfg, feats)
        assert state.w.tolist() == [0.0, 1.0, 0.0]

    def test_group_dro_tie_breaks_to_lowest_index(self):
        from tdro.model import set_flat_params
        model, feats, batch, state, beta = toy_problem()
        # zero parameters: every sample's loss is exactly ln 2, so all
        # streaming losses tie exactly after the update (mu=1 replaces)
        set_flat_params(model, np.zeros(num_params(model)))
        cfg = TdroConfig(mode="group_dro", K=3, E=2, eta=0.5, mu=1.0)
        group_dro_step(model, batch, state, cfg, feats)
        assert state.stream_loss.min() == state.stream_loss.max()
        assert state.w.tolist() == [1.0, 0.0, 0.0]

    def test_absent_group_retains_stream_loss_and_gradient(self):
        model, feats, batch, state, beta = toy_problem()
        # remove group 2 from the batch
        keep = batch.groups != 2
        batch = batch.take(keep)
        state.stream_loss[:] = [1.0, 1.0, 7.0]
        state.grad_group[2] = 3.25
        cfg = TdroConfig(mode="tdro", K=3, E=2, eta=0.5)
        tdro_step(model, batch, state, cfg, feats, beta)
        assert state.stream_loss[2] == 7.0
        assert np.all(state.grad_group[2] == 3.25)

    def test_cell_ema_merges_present_and_keeps_absent(self):
        model, feats, batch, state, beta = toy_problem()
        state.grad_cell[:] = 2.0
        cfg = TdroConfig(mode="tdro", K=3, E=2, eta=0.5, ema_decay=0.5)
        present = {(int(g), int(p)) for g, p in zip(batch.groups,
                                                    batch.periods)}
        tdro_step(model, batch, state, cfg, feats, beta)
        for g in range(3):
            for e in range(2):
                changed = not np.allclose(state.grad_cell[g, e], 2.0)
                assert changed == ((g, e) in present)

    def test_state_roundtrip(self, tmp_path):
        model, feats, batch, state, beta = toy_problem()
        cfg = TdroConfig(mode="tdro", K=3, E=2, eta=0.5)
        tdro_step(model, batch, state, cfg, feats, beta)
        path = tmp_path / "state.npz"
        save_state(path, state)
        loaded = load_state(path)
        assert np.array_equal(loaded.w, state.w)
        assert np.array_equal(loaded.grad_cell, state.grad_cell)
        assert loaded.step == state.step


class TestNegativeSampling:
    def test_never_collides_with_positive(self):
        rng = np.random.default_rng(0)
        warm = np.arange(5)
        pos = np.array([0, 1, 2, 3, 4] * 20)
        neg = sample_negatives(rng, warm, pos)
        assert np.all(neg != pos)
        assert np.all(np.isin(neg, warm))

    def test_single_warm_item_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_negatives(rng, np.array([3]), np.array([3]))


class TestTrain:
    def test_zero_epochs_returns_model_unchanged(self, toy_split, toy_index):
        ds = toy_split.data
        model = init_model(ds.num_users, ds.num_items, toy_split.warm_items,
                           ds.d_feat, d=4, h=6, seed=0)
        before = get_flat_params(model).copy()
        res = train(toy_split, toy_index, model, TdroConfig(mode="tdro"),
                    epochs=0, batch_size=64, seed=0)
        assert np.array_equal(get_flat_params(res.model), before)
        assert res.log.rows == []

    def test_training_improves_over_initial_model(self, toy_split, toy_index):
        from tdro.evaluate import evaluate_split
        ds = toy_split.data
        model = init_model(ds.num_users, ds.num_items, toy_split.warm_items,
                           ds.d_feat, d=4, h=6, seed=0)
        initial = evaluate_split(model, toy_split, part="valid",
                                 setting="all", k=10).recall()
        res = train(toy_split, toy_index, model,
                    TdroConfig(mode="tdro", eta=5.0), epochs=40,
                    batch_size=64, seed=0, k_metric=10)
        assert res.best_val_recall >= initial
        assert res.best_val_recall > initial + 0.05  # actually learns

    def test_deterministic_given_seed(self, toy_split, toy_index):
        ds = toy_split.data
        logs = []
        for _ in range(2):
            model = init_model(ds.num_users, ds.num_items,
                               toy_split.warm_items, ds.d_feat, d=4, h=6,
                               seed=3)
            res = train(toy_split, toy_index, model,
                        TdroConfig(mode="tdro", eta=2.0), epochs=3,
                        batch_size=64, seed=3)
            logs.append(res.log.numeric_rows())
        assert logs[0] == logs[1]

    def test_patience_stops_early(self, toy_split, toy_index):
        ds = toy_split.data
        model = init_model(ds.num_users, ds.num_items, toy_split.warm_items,
                           ds.d_feat, d=4, h=6, seed=0)
        res = train(toy_split, toy_index, model,
                    TdroConfig(mode="erm", eta=1e-8), epochs=50,
                    batch_size=64, seed=0, patience=2)
        # lr ~ 0: recall never improves after epoch 0, so 1 + (2+1) epochs
        assert len(res.log.rows) <= 5

    def test_mismatched_index_rejected(self, toy_split, toy_index):
        ds = toy_split.data
        model = init_model(ds.num_users, ds.num_items, toy_split.warm_items,
                           ds.d_feat, d=4, h=6, seed=0)
        with pytest.raises(ValueError, match="match the index"):
            train(toy_split, toy_index, model,
                  TdroConfig(mode="tdro", K=5, E=3), epochs=1,
                  batch_size=64, seed=0)

    def test_log_columns(self, toy_split, toy_index, tmp_path):
        ds = toy_split.data
        model = init_model(ds.num_users, ds.num_items, toy_split.warm_items,
                           ds.d_feat, d=4, h=6, seed=0)
        res = train(toy_split, toy_index, model, TdroConfig(mode="tdro"),
                    epochs=2, batch_size=64, seed=0)
        header = res.log.header()
        assert header[:3] == ["epoch", "mode", "train_loss"]
        assert "loss_g2" in header
        assert "w_2" in header
        assert header[-2] == "val_recall_at_20"
        assert header[-1] == "wall_ms"
        path = tmp_path / "log.csv"
        res.log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(header)
        assert len(lines) == 3


class TestConfigValidation:
    def test_defaults_are_valid(self):
        TdroConfig().validate()

    @pytest.mark.parametrize("kw", [
        {"mode": "bogus"}, {"lam": 1.5}, {"lam": -0.1}, {"mu": 0.0},
        {"mu": 1.5}, {"eta": 0.0}, {"eta_w": -1.0}, {"K": 0},
        {"ema_decay": 1.0}, {"p": -0.5},
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ValueError):
            TdroConfig(**kw).validate()
