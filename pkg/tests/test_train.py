"""Trainer tests: schedule values, determinism, early stopping, history."""

import io
import json
import math

import numpy as np
import pytest

from trajseg.models import Model, default_spec
from trajseg.synth import SynthConfig, generate_dataset
from trajseg.train import (
    TrainConfig,
    TrainingDiverged,
    evaluate_epoch,
    lr_at,
    train,
)
from trajseg.trips import DatasetSplit


@pytest.fixture(scope="module")
def small_split():
    config = SynthConfig(seed=11, length_range=(60, 120))
    return generate_dataset(config, 40)


def _mlp_model(seed=0):
    return Model(default_spec("trajyolo", "mlp"), seed=seed)


class TestLrSchedule:
    def test_reference_epochs(self):
        config = TrainConfig()
        assert lr_at(0, config) == pytest.approx(1e-3, rel=1e-12)
        assert lr_at(9, config) == pytest.approx(1e-3, rel=1e-12)
        assert lr_at(10, config) == pytest.approx(1e-4, rel=1e-12)
        assert lr_at(25, config) == pytest.approx(1e-5, rel=1e-12)
        assert lr_at(40, config) == pytest.approx(1e-7, rel=1e-12)

    def test_floor_freezes_instead_of_undershooting(self):
        config = TrainConfig()
        # one more decade would cross 1e-7, so the rate stays put
        assert lr_at(70, config) == pytest.approx(1e-7, rel=1e-12)
        assert lr_at(999, config) == lr_at(50, config)

    def test_never_increases(self):
        config = TrainConfig()
        rates = [lr_at(e, config) for e in range(0, 120)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert min(rates) >= config.lr_floor


class TestConfigValidation:
    def test_rejects_nonpositive_counts(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)

    def test_rejects_bad_rates(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_initial=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_factor=1.5)

    def test_rejects_negative_min_delta(self):
        with pytest.raises(ValueError):
            TrainConfig(min_delta=-0.1)


class TestTrainSmoke:
    def test_loss_decreases_over_five_epochs(self, small_split):
        model = _mlp_model(seed=1)
        config = TrainConfig(batch_size=16, max_epochs=5, seed=3)
        result = train(model, small_split, config)
        assert len(result.history) == 5
        losses = [r["train_loss"] for r in result.history]
        assert all(math.isfinite(v) for v in losses)
        assert losses[-1] < losses[0]

    def test_history_record_keys_and_lr(self, small_split):
        model = _mlp_model(seed=1)
        config = TrainConfig(batch_size=16, max_epochs=3, seed=3)
        result = train(model, small_split, config)
        for epoch, record in enumerate(result.history):
            assert sorted(record) == ["epoch", "lr", "train_loss", "val_Ap", "val_loss"]
            assert record["epoch"] == epoch
            assert record["lr"] == lr_at(epoch, config)
            assert 0.0 <= record["val_Ap"] <= 1.0

    def test_best_epoch_is_argmin_of_val_loss(self, small_split):
        model = _mlp_model(seed=2)
        config = TrainConfig(batch_size=16, max_epochs=6, seed=4)
        result = train(model, small_split, config)
        val = [r["val_loss"] for r in result.history]
        assert result.best_epoch == int(np.argmin(val))
        assert result.best_val_loss == min(val)

    def test_restores_best_parameters(self, small_split):
        model = _mlp_model(seed=2)
        config = TrainConfig(batch_size=16, max_epochs=4, seed=4)
        result = train(model, small_split, config)
        val_loss, _ = evaluate_epoch(model, small_split.val, config)
        assert val_loss == pytest.approx(result.best_val_loss, rel=1e-9)


class TestDeterminism:
    def test_identical_seeds_identical_history_bytes(self, small_split):
        records = []
        for _ in range(2):
            model = _mlp_model(seed=7)
            config = TrainConfig(batch_size=16, max_epochs=3, seed=9)
            buf = io.StringIO()
            train(model, small_split, config, history_fp=buf)
            records.append(buf.getvalue())
        assert records[0] == records[1]
        for line in records[0].splitlines():
            parsed = json.loads(line)
            assert list(parsed) == sorted(parsed)

    def test_different_shuffle_seed_changes_history(self, small_split):
        histories = []
        for seed in (9, 10):
            model = _mlp_model(seed=7)
            config = TrainConfig(batch_size=16, max_epochs=2, seed=seed)
            histories.append(train(model, small_split, config).history)
        assert histories[0] != histories[1]


class TestEarlyStopping:
    def test_flat_loss_stops_after_patience(self, small_split):
        model = _mlp_model(seed=3)
        # vanishing rate keeps the model frozen, so no epoch improves
        config = TrainConfig(
            batch_size=16, max_epochs=50, patience=3, seed=5,
            lr_initial=1e-20, lr_floor=1e-30,
        )
        result = train(model, small_split, config)
        assert len(result.history) == 4
        assert result.stopped_epoch == 3

    def test_runs_to_max_epochs_when_improving(self, small_split):
        model = _mlp_model(seed=1)
        config = TrainConfig(batch_size=16, max_epochs=4, patience=4, seed=3)
        result = train(model, small_split, config)
        assert result.stopped_epoch == config.max_epochs - 1


class TestFailureModes:
    def test_empty_validation_rejected(self, small_split):
        model = _mlp_model()
        split = DatasetSplit(train=small_split.train, val=[], test=[], seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            train(model, split, TrainConfig())

    def test_non_finite_loss_aborts_with_diagnostic(self, small_split):
        model = _mlp_model(seed=1)
        model.params[0].data[:] = np.nan
        config = TrainConfig(batch_size=16, max_epochs=2, seed=3)
        with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
            train(model, small_split, config)

    def test_evaluate_empty_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate_epoch(_mlp_model(), [], TrainConfig())
