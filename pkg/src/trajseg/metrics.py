"""Evaluation: confusion matrices, pointwise scores, change point matching.

Pointwise quality is summarized by overall accuracy (correct points over
all points) and a support-weighted F1 that skips classes absent from the
truth. Change point detection is scored by greedy one-to-one matching
inside each trip: true points are visited in index order and each takes
the nearest still-unmatched proposal within the match radius (150 m
geodesic by default). A fixed-duration-window splitter serves as the
reference baseline for that task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import json

import numpy as np

from .geo import vincenty_distance
from .models import Model, Prediction, predict_batch
from .trips import NUM_MODES, Mode, Trip, pad_batch

DEFAULT_CP_RADIUS_M = 150.0


def confusion_matrix(
    true_seqs: Sequence[np.ndarray],
    pred_seqs: Sequence[np.ndarray],
    n_classes: int = NUM_MODES,
) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    if len(true_seqs) != len(pred_seqs):
        raise ValueError("need one prediction sequence per truth sequence")
    counts = np.zeros(n_classes * n_classes, dtype=np.int64)
    for t, p in zip(true_seqs, pred_seqs):
        t = np.asarray(t, dtype=np.int64)
        p = np.asarray(p, dtype=np.int64)
        if t.shape != p.shape:
            raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
        if t.size and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
            raise ValueError("class index out of range")
        counts += np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


@dataclass(frozen=True)
class PointwiseMetrics:
    """Per-class and aggregate scores derived from one confusion matrix."""

    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray   # nan when the class was never predicted
    recall: np.ndarray      # nan when the class is absent from the truth
    f1: np.ndarray          # nan when the class is absent from the truth
    support: np.ndarray
    weighted_f1: float


def pointwise_metrics(confusion: np.ndarray) -> PointwiseMetrics:
    confusion = np.asarray(confusion, dtype=np.int64)
    k = confusion.shape[0]
    if confusion.shape != (k, k) or np.any(confusion < 0):
        raise ValueError("confusion matrix must be square and nonnegative")
    total = int(confusion.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)

    recall = np.full(k, np.nan)
    np.divide(diag, support, out=recall, where=support > 0)
    precision = np.full(k, np.nan)
    np.divide(diag, predicted, out=precision, where=predicted > 0)

    f1 = np.full(k, np.nan)
    for c in range(k):
        if support[c] == 0:
            continue
        # class present but never predicted counts as zero precision
        p = precision[c] if predicted[c] > 0 else 0.0
        r = recall[c]
        f1[c] = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)

    present = support > 0
    weighted_f1 = float(np.sum(support[present] * f1[present]) / np.sum(support[present]))
    return PointwiseMetrics(
        confusion=confusion,
        accuracy=float(diag.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        weighted_f1=weighted_f1,
    )


@dataclass(frozen=True)
class CpScore:
    """Aggregate change point match counts with safe-ratio accessors."""

    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def match_change_points(
    trip: Trip, pred_indices: np.ndarray, radius_m: float = DEFAULT_CP_RADIUS_M
) -> CpScore:
    """Greedy matching: each true point, in index order, takes the nearest
    unmatched proposal within radius_m; proposals pair up at most once."""
    preds = [int(i) for i in pred_indices]
    unmatched = list(range(len(preds)))
    tp = 0
    for true_idx in trip.cp_indices:
        true_pt = trip.points[int(true_idx)]
        best_pos = -1
        best_d = np.inf
        for pos in unmatched:
            d = vincenty_distance(true_pt, trip.points[preds[pos]])
            if d < best_d:
                best_d = d
                best_pos = pos
        if best_pos >= 0 and best_d <= radius_m:
            tp += 1
            unmatched.remove(best_pos)
    return CpScore(tp=tp, fp=len(unmatched), fn=len(trip.cp_indices) - tp)


def cp_score(
    trips: Sequence[Trip],
    pred_indices: Sequence[np.ndarray],
    radius_m: float = DEFAULT_CP_RADIUS_M,
) -> CpScore:
    if len(trips) != len(pred_indices):
        raise ValueError("need one proposal array per trip")
    tp = fp = fn = 0
    for trip, preds in zip(trips, pred_indices):
        s = match_change_points(trip, preds, radius_m)
        tp += s.tp
        fp += s.fp
        fn += s.fn
    return CpScore(tp=tp, fp=fp, fn=fn)


def utw_change_points(trip: Trip, window_seconds: float) -> np.ndarray:
    """Fixed-duration-window proposals: the first point at or past each
    interior boundary t0 + j*w, duplicates collapsed."""
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    t = np.array([p.t for p in trip.points])
    out: list[int] = []
    j = 1
    while True:
        boundary = t[0] + j * window_seconds
        if boundary >= t[-1]:
            break
        idx = int(np.searchsorted(t, boundary, side="left"))
        if not out or idx != out[-1]:
            out.append(idx)
        j += 1
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class EvalReport:
    """Everything one model run produces on one trip set."""

    pointwise: PointwiseMetrics
    cp: CpScore
    cp_utw: CpScore
    n_trips: int
    n_points: int


def evaluate_model(
    model: Model,
    trips: Sequence[Trip],
    radius_m: float = DEFAULT_CP_RADIUS_M,
    utw_window_seconds: float = 120.0,
    chunk: int = 128,
) -> EvalReport:
    if len(trips) == 0:
        raise ValueError("cannot evaluate on an empty trip set")
    batch = pad_batch(trips, n_max=model.spec.n_max)
    preds = predict_batch(model, batch.features, batch.lengths, chunk=chunk)
    confusion = confusion_matrix(
        [t.labels for t in trips],
        [p.pointwise_labels for p in preds],
        n_classes=model.spec.n_classes,
    )
    return EvalReport(
        pointwise=pointwise_metrics(confusion),
        cp=cp_score(trips, [p.cp_indices for p in preds], radius_m),
        cp_utw=cp_score(
            trips, [utw_change_points(t, utw_window_seconds) for t in trips], radius_m
        ),
        n_trips=len(trips),
        n_points=int(sum(t.length for t in trips)),
    )


def _round6(x: float) -> float | None:
    return None if not np.isfinite(x) else round(float(x), 6)


def report_to_dict(report: EvalReport) -> dict:
    """JSON-safe nested dict; nan becomes null, floats round to 6 places."""
    pw = report.pointwise
    per_class = {
        Mode(c).name.lower(): {
            "precision": _round6(pw.precision[c]),
            "recall": _round6(pw.recall[c]),
            "f1": _round6(pw.f1[c]),
            "support": int(pw.support[c]),
        }
        for c in range(len(pw.support))
    }
    def cp_block(s: CpScore) -> dict:
        return {
            "tp": s.tp, "fp": s.fp, "fn": s.fn,
            "precision": _round6(s.precision),
            "recall": _round6(s.recall),
            "f1": _round6(s.f1),
        }
    return {
        "n_trips": report.n_trips,
        "n_points": report.n_points,
        "accuracy": _round6(pw.accuracy),
        "weighted_f1": _round6(pw.weighted_f1),
        "confusion": pw.confusion.tolist(),
        "classes": per_class,
        "cp": cp_block(report.cp),
        "cp_utw": cp_block(report.cp_utw),
    }


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report_to_dict(report), sort_keys=True, separators=(",", ":")) + "\n"


def render_report(report: EvalReport) -> str:
    """Aligned text table: one row per class, aggregate lines below."""
    pw = report.pointwise
    names = [Mode(c).name.capitalize() for c in range(len(pw.support))]
    width = max(len(n) for n in names + ["Weighted F1", "CP windows"]) + 2

    def fmt(x: float) -> str:
        return "   -  " if not np.isfinite(x) else f"{x:6.3f}"

    lines = [f"{'':{width}}{'Prec':>7}{'Recall':>8}{'F1':>7}{'Support':>9}"]
    for c, name in enumerate(names):
        lines.append(
            f"{name:<{width}}{fmt(pw.precision[c]):>7}{fmt(pw.recall[c]):>8}"
            f"{fmt(pw.f1[c]):>7}{int(pw.support[c]):>9}"
        )
    lines.append(f"{'Accuracy':<{width}}{pw.accuracy:6.3f}")
    lines.append(f"{'Weighted F1':<{width}}{pw.weighted_f1:6.3f}")
    for tag, s in (("CP model", report.cp), ("CP windows", report.cp_utw)):
        lines.append(
            f"{tag:<{width}}prec {s.precision:5.3f}  recall {s.recall:5.3f}"
            f"  f1 {s.f1:5.3f}  (tp {s.tp} fp {s.fp} fn {s.fn})"
        )
    return "\n".join(lines) + "\n"
