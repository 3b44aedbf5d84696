import math
from dataclasses import replace

import numpy as np
import pytest

from cnnlstm_ids.data import FlowTable, generate_synthetic, minmax_apply, minmax_fit
from cnnlstm_ids.errors import ConfigError, DataError, DimensionError, DivergenceError, LabelError
from cnnlstm_ids.evaluation import evaluate
from cnnlstm_ids.gradcheck import LOSS_TOLERANCE, check_sigmoid_bce
from cnnlstm_ids.model import ArchitectureConfig, backward, build_model, forward
from cnnlstm_ids.optim import AdamState, EarlyStopping, TrainConfig, adam_step, bce_loss, train
from cnnlstm_ids.tensor import Rng

TINY = ArchitectureConfig(16, ((3, 2), (3, 2), (3, 2)), 2, (3, 4), 6, 0.0)


def separable_table(n_per_class=4, F=16, seed=0):
    rng = Rng(seed)
    X0 = 0.2 * rng.random((n_per_class, F))
    X1 = 0.8 + 0.2 * rng.random((n_per_class, F))
    X = np.vstack([X0, X1])
    y = np.array([0] * n_per_class + [1] * n_per_class, dtype=np.int64)
    return FlowTable([f"f{i}" for i in range(F)], X, y)


class TestBce:
    def test_perfect_prediction(self):
        loss, _ = bce_loss([1.0, 0.0, 1.0], [1, 0, 1])
        assert 0 <= loss <= 1e-11

    def test_half(self):
        loss, dz = bce_loss([0.5], [1])
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        assert dz.tolist() == [-0.5]

    def test_gradient_is_p_minus_y_over_n(self):
        p = np.array([0.2, 0.7, 0.9, 0.4])
        y = np.array([0, 1, 0, 1])
        assert np.allclose(bce_loss(p, y)[1], (p - y) / 4, atol=0)

    @pytest.mark.parametrize("seed", range(20))
    def test_logit_gradient_finite_differences(self, seed):
        assert check_sigmoid_bce(seed) <= LOSS_TOLERANCE

    def test_bad_labels(self):
        with pytest.raises(LabelError):
            bce_loss([0.5, 0.5], [0, 2])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss([0.5, 0.5], [0])

    def test_pos_weight_scales_positive_term(self):
        p, y = np.array([0.3, 0.6]), np.array([1, 0])
        l1, _ = bce_loss(p, y)
        l3, _ = bce_loss(p, y, pos_weight=3.0)
        assert l3 - l1 == pytest.approx(-2 * math.log(0.3) / 2, abs=1e-12)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(learning_rate=0.01)
        for g in (-3.0, 1e-3, 250.0):
            params = {"w": np.array([1.0])}
            state = AdamState.zeros_like(params)
            adam_step(params, {"w": np.array([g])}, state, cfg)
            expected = 1.0 - 0.01 * g / (abs(g) + 1e-8)
            assert params["w"][0] == pytest.approx(expected, abs=1e-15)
            assert state.t == 1

    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.5, -2.0])}
        state = AdamState.zeros_like(params)
        for _ in range(10):
            adam_step(params, {"w": np.zeros(2)}, state, TrainConfig())
        assert params["w"].tolist() == [1.5, -2.0] and state.t == 10

    def test_constant_gradient_step_tends_to_lr(self):
        params = {"w": np.array([0.0])}
        state = AdamState.zeros_like(params)
        cfg = TrainConfig(learning_rate=0.001)
        prev = 0.0
        for _ in range(5000):
            adam_step(params, {"w": np.array([0.7])}, state, cfg)
            step = prev - params["w"][0]
            prev = params["w"][0]
        assert step == pytest.approx(0.001, rel=1e-6)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(DimensionError):
            adam_step(params, {"w": np.zeros(3)}, AdamState.zeros_like(params), TrainConfig())

    @pytest.mark.parametrize("seed", range(20))
    def test_single_sample_step_decreases_loss(self, seed):
        model = build_model(TINY, seed)
        x = Rng(seed).random((1, 16))
        y = np.array([seed % 2])
        before, dz = bce_loss(forward(model, x).probability, y)
        grads = backward(model, forward(model, x, "train", Rng(0)), dz)
        adam_step(model.params, grads, AdamState.zeros_like(model.params), TrainConfig(learning_rate=1e-4))
        after, _ = bce_loss(forward(model, x).probability, y)
        assert after < before


class TestEarlyStopping:
    def test_trace(self):
        es = EarlyStopping(patience=1)
        assert es.update(1, 0.5) == (True, False)
        assert es.update(2, 0.6) == (False, True)
        assert es.best_epoch == 1

    def test_patience_counts_consecutive_misses(self):
        es = EarlyStopping(patience=3)
        outcomes = [es.update(e, v) for e, v in enumerate([1.0, 0.9, 0.95, 0.8, 0.85, 0.86, 0.87], start=1)]
        assert [stop for _, stop in outcomes] == [False] * 6 + [True]
        assert es.best_epoch == 4

    def test_equal_value_is_not_an_improvement(self):
        es = EarlyStopping(patience=2)
        es.update(1, 0.5)
        assert es.update(2, 0.5) == (False, False)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.patience) == (0.001, 16, 150, 10)
        assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.validation_fraction) == (0.9, 0.999, 1e-8, 0.1)
        assert cfg.restore_best and cfg.validation_source == "carve"

    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"validation_fraction": 1.0},
                                    {"validation_fraction": 0.0}, {"patience": 0}, {"batch_size": 0},
                                    {"validation_source": "other"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            replace(TrainConfig(), **kw).validate()


class TestTrain:
    def test_memorizes_eight_samples(self):
        # default architecture and optimiser settings
        table = separable_table(4, F=30)
        model = build_model(ArchitectureConfig(30), 1)
        cfg = TrainConfig(max_epochs=200, validation_source="test", patience=200, restore_best=False)
        run = train(model, table, cfg, monitor_table=table)
        assert run.history[-1]["train_loss"] < 0.01
        assert evaluate(model, table)[1].accuracy == 100.0

    def test_history_bounds_and_stopping_rule(self):
        table = separable_table(12)
        cfg = TrainConfig(max_epochs=30, batch_size=4, patience=2, validation_fraction=0.25)
        run = train(build_model(TINY, 2), table, cfg)
        assert len(run.history) == run.stopped_epoch <= 30
        assert run.stopped_epoch - run.best_epoch <= cfg.patience
        assert [h["epoch"] for h in run.history] == list(range(1, run.stopped_epoch + 1))

    def test_forced_early_stop(self):
        # a huge step size makes validation loss rise right after the first epoch
        table = separable_table(12)
        cfg = TrainConfig(max_epochs=20, batch_size=2, patience=1, learning_rate=5.0, validation_fraction=0.25)
        losses = []
        try:
            run = train(build_model(TINY, 3), table, cfg)
        except DivergenceError:
            pytest.skip("diverged before the stopping rule applied")
        losses = [h["val_loss"] for h in run.history]
        assert run.stopped_epoch == run.best_epoch + 1
        assert all(losses[run.best_epoch - 1] < v for v in losses[run.best_epoch:])

    def test_restore_best(self):
        table = separable_table(12)
        cfg = TrainConfig(max_epochs=6, batch_size=4, patience=10, learning_rate=0.05, validation_fraction=0.25)
        model = build_model(TINY, 4)
        run = train(model, table, cfg)
        best = min(h["val_loss"] for h in run.history)
        assert run.history[run.best_epoch - 1]["val_loss"] == best

    def test_deterministic_history(self):
        table = separable_table(10)
        cfg = TrainConfig(max_epochs=4, batch_size=3, validation_fraction=0.2)
        a = train(build_model(TINY, 5), table, cfg)
        b = train(build_model(TINY, 5), table, cfg)
        assert a.history == b.history
        assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)

    def test_first_batch_loss_near_ln2(self):
        table = separable_table(8)
        model = build_model(TINY, 6)
        loss, _ = bce_loss(forward(model, table.X, "train", Rng(0)).probability, table.labels)
        assert abs(loss - math.log(2)) <= 0.2

    def test_empty_class(self):
        table = separable_table(4)
        one_class = table.subset(np.arange(4))
        with pytest.raises(DataError):
            train(build_model(TINY, 0), one_class, TrainConfig(max_epochs=1))

    def test_divergence_reports_epoch(self):
        table = separable_table(6)
        model = build_model(TINY, 0)
        model.params["output.b"][:] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(model, table, TrainConfig(max_epochs=2, validation_fraction=0.34))
        assert info.value.epoch == 1

    def test_test_monitor_requires_table(self):
        with pytest.raises(ConfigError):
            train(build_model(TINY, 0), separable_table(4), TrainConfig(validation_source="test"))

    def test_epoch_visits_every_sample_once(self):
        base = Rng(42)
        for epoch in range(1, 5):
            order = base.split(2 * epoch).permutation(37)
            assert sorted(order.tolist()) == list(range(37))
