"""Mini-batch training loop: Adam, step-decay schedule, early stopping.

The learning rate starts at 1e-3 and divides by 10 every 10 epochs,
freezing at its last value >= 1e-7. Early stopping watches validation
loss: when no improvement of at least min_delta arrives for `patience`
epochs, training stops and the parameters roll back to the best
validation epoch. Batch losses are normalized by the number of real
(unpadded) points so batch composition does not rescale gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TextIO

import json

import numpy as np

from . import nn
from .models import Model, unified_loss
from .trips import DatasetSplit, Trip, pad_batch


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/batch diagnostic."""


@dataclass(frozen=True)
class TrainConfig:
    """Schedule knobs; defaults follow the stock recipe."""

    batch_size: int = 128
    max_epochs: int = 100
    lr_initial: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    lr_floor: float = 1e-7
    patience: int = 15
    min_delta: float = 1e-3
    lam_loc: float = 300.0
    lam_cls: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.batch_size, self.max_epochs, self.lr_decay_every, self.patience) < 1:
            raise ValueError("batch size, epochs, decay interval, patience must be >= 1")
        if self.lr_initial <= 0 or self.lr_floor <= 0 or not 0 < self.lr_decay_factor < 1:
            raise ValueError("learning rates must be positive, decay factor in (0, 1)")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")


@dataclass
class TrainResult:
    """Per-epoch history plus the best-validation bookkeeping."""

    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_epoch: int = -1


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step-decayed rate, frozen at the last value >= the floor."""
    lr = config.lr_initial
    for _ in range(epoch // config.lr_decay_every):
        nxt = lr * config.lr_decay_factor
        if nxt < config.lr_floor:
            break
        lr = nxt
    return lr


def _loss_l_uni(model: Model) -> int | None:
    return model.l_uni if model.spec.framework == "trajssd" else None


def evaluate_epoch(
    model: Model, trips: Sequence[Trip], config: TrainConfig
) -> tuple[float, float]:
    """Mean per-point loss and point accuracy over a trip set (no dropout)."""
    from .models import predict_batch

    total_loss = 0.0
    total_points = 0
    correct = 0
    for start in range(0, len(trips), config.batch_size):
        chunk = trips[start : start + config.batch_size]
        batch = pad_batch(chunk, n_max=model.spec.n_max)
        with nn.no_grad():
            out = model.forward(batch.features, training=False, lengths=batch.lengths)
            _, parts = unified_loss(
                out, batch, model.spec, l_uni=_loss_l_uni(model),
                lam_loc=config.lam_loc, lam_cls=config.lam_cls,
            )
        total_loss += parts.total
        total_points += parts.n_real_points
        preds = _decode_output(model, out.data, batch.lengths)
        for trip, pred in zip(chunk, preds):
            correct += int(np.sum(pred.pointwise_labels == trip.labels))
    if total_points == 0:
        raise ValueError("cannot evaluate on an empty trip set")
    return total_loss / total_points, correct / total_points


def _decode_output(model: Model, out_data: np.ndarray, lengths: np.ndarray):
    from .models import decode_ssd, decode_yolo

    spec = model.spec
    preds = []
    for row, n in zip(out_data, lengths):
        n = int(n)
        if spec.framework == "trajyolo":
            n_slots = spec.n_cp_slots
            preds.append(
                decode_yolo(
                    row[:n_slots],
                    row[n_slots:].reshape(n_slots + 1, spec.n_classes),
                    n,
                    spec.n_max,
                )
            )
        else:
            preds.append(decode_ssd(row.T, n, model.l_uni))
    return preds


def train(
    model: Model,
    split: DatasetSplit,
    config: TrainConfig,
    history_fp: TextIO | None = None,
) -> TrainResult:
    """Fit the model; returns history and restores the best-val parameters.

    Deterministic given config.seed: one stream drives the epoch
    shuffles, an independent stream drives dropout masks.
    """
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("train and validation sets must be non-empty")

    shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    state = nn.AdamState.for_params(model.params, lr=config.lr_initial)
    result = TrainResult()
    best_params: list[np.ndarray] | None = None
    best_tracked = float("inf")    # last value that beat min_delta
    epochs_without_gain = 0

    for epoch in range(config.max_epochs):
        state.lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(len(split.train))
        epoch_loss = 0.0
        epoch_points = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [split.train[i] for i in order[start : start + config.batch_size]]
            batch = pad_batch(chunk, n_max=model.spec.n_max)
            model.zero_grad()
            out = model.forward(
                batch.features, training=True, rng=dropout_rng,
                lengths=batch.lengths,
            )
            loss_t, parts = unified_loss(
                out, batch, model.spec, l_uni=_loss_l_uni(model),
                lam_loc=config.lam_loc, lam_cls=config.lam_cls,
            )
            if not np.isfinite(loss_t.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}: {loss_t.data!r}"
                )
            scaled = nn.scale(loss_t, 1.0 / parts.n_real_points)
            scaled.backward()
            nn.adam_step(model.params, state)
            epoch_loss += parts.total
            epoch_points += parts.n_real_points

        train_loss = epoch_loss / epoch_points
        val_loss, val_ap = evaluate_epoch(model, split.val, config)
        record = {
            "epoch": epoch,
            "lr": state.lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_Ap": val_ap,
        }
        result.history.append(record)
        if history_fp is not None:
            history_fp.write(json.dumps(record, sort_keys=True) + "\n")
            history_fp.flush()

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_params = [p.data.copy() for p in model.params]
        if val_loss < best_tracked - config.min_delta:
            best_tracked = val_loss
            epochs_without_gain = 0
        else:
            epochs_without_gain += 1
        result.stopped_epoch = epoch
        if epochs_without_gain >= config.patience:
            break

    if best_params is not None:
        for p, data in zip(model.params, best_params):
            p.data[...] = data
    return result
