"""Trip domain model: labels, change-point targets, splitting, padding, IO.

A trip holds smoothed kinematic features (speed, accel, jerk), per-point
mode labels, the original GPS points, and the derived change-point
targets. A change point at index i means the mode differs between
points i-1 and i; its coordinate is i / N, in (0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence, TextIO

import numpy as np

from .geo import GpsPoint, compute_kinematics, smooth_five_spot_triple, surviving_indices

N_MIN = 20
N_MAX = 400
TRIP_GAP_SECONDS = 1200.0
DATASET_FORMAT = "trajseg-dataset-v1"


class Mode(IntEnum):
    """The five transportation classes, with a fixed index order."""

    WALK = 0
    BIKE = 1
    BUS = 2
    CAR = 3
    TRAIN = 4


NUM_MODES = len(Mode)


@dataclass(frozen=True)
class LabelInterval:
    """A labeled time span [start_t, end_t) carrying one mode."""

    start_t: float
    end_t: float
    mode: Mode

    def __post_init__(self) -> None:
        if not self.start_t < self.end_t:
            raise ValueError("interval must have start_t < end_t")


@dataclass
class Trip:
    """One preprocessed trip of N points, 20 <= N <= 400."""

    features: np.ndarray        # (N, 3) smoothed speed / accel / jerk
    labels: np.ndarray          # (N,) mode indices
    points: list[GpsPoint]      # retained for distance-based evaluation
    cp_indices: np.ndarray      # (n_cp,) strictly increasing, in [1, N-1]
    cp_coords: np.ndarray       # (n_cp,) cp_indices / N

    @property
    def length(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        n = self.length
        if not N_MIN <= n <= N_MAX:
            raise ValueError(f"trip length {n} outside [{N_MIN}, {N_MAX}]")
        if self.features.shape != (n, 3):
            raise ValueError("features must be (N, 3)")
        if len(self.points) != n:
            raise ValueError("points length mismatch")
        if not np.all((self.labels >= 0) & (self.labels < NUM_MODES)):
            raise ValueError("labels outside mode range")
        idx = self.cp_indices
        if len(idx) != len(self.cp_coords):
            raise ValueError("cp_indices / cp_coords length mismatch")
        if len(idx) > 0:
            if not (np.all(np.diff(idx) > 0) and idx[0] >= 1 and idx[-1] <= n - 1):
                raise ValueError("cp_indices must be strictly increasing in [1, N-1]")
            if not np.array_equal(self.cp_coords, idx / n):
                raise ValueError("cp_coords must equal cp_indices / N")
            if np.any(self.labels[idx] == self.labels[idx - 1]):
                raise ValueError("labels must change at every change point")
        expect_idx, _, _, _ = derive_targets(self.labels)
        if not np.array_equal(expect_idx, idx):
            raise ValueError("cp_indices do not match label runs")


@dataclass
class PaddedBatch:
    """Fixed-width batch: zero-padded features plus a real-point mask."""

    features: np.ndarray            # (B, N_max, 3)
    mask: np.ndarray                # (B, N_max) bool, True = real point
    labels: np.ndarray              # (B, N_max) int, -1 where padded
    lengths: np.ndarray             # (B,)
    cp_indices: list[np.ndarray]    # per trip, ragged
    cp_coords_nmax: list[np.ndarray]    # cp_indices / N_max


@dataclass
class DatasetSplit:
    """Disjoint train / val / test trip lists and the seed that made them."""

    train: list[Trip]
    val: list[Trip]
    test: list[Trip]
    seed: int


def derive_targets(
    labels: Sequence[int] | np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Run-length decomposition of a label sequence.

    Returns (cp_indices, cp_coords, segment_modes, segment_lengths).
    A change point sits at the first index of each new run; its
    coordinate is index / N. n change points imply n + 1 segments.
    """
    lab = np.asarray(labels, dtype=np.int64)
    n = len(lab)
    if n < 1:
        raise ValueError("need at least one label")
    cp_indices = np.nonzero(lab[1:] != lab[:-1])[0] + 1
    cp_coords = cp_indices / n
    bounds = np.concatenate([[0], cp_indices, [n]])
    seg_modes = lab[bounds[:-1]]
    seg_lengths = np.diff(bounds)
    return cp_indices, cp_coords, seg_modes, seg_lengths


def labels_from_segments(
    seg_modes: Sequence[int] | np.ndarray, seg_lengths: Sequence[int] | np.ndarray
) -> np.ndarray:
    """Inverse of derive_targets: expand runs back to per-point labels."""
    return np.repeat(
        np.asarray(seg_modes, dtype=np.int64), np.asarray(seg_lengths, dtype=np.int64)
    )


def label_points(
    track: Sequence[GpsPoint], intervals: Sequence[LabelInterval]
) -> list[tuple[GpsPoint, Mode]]:
    """Attach a mode to each point whose timestamp falls in an interval.

    Intervals are half-open [start, end): a point on a shared boundary
    belongs to the later interval. Unlabeled points are dropped.
    """
    ivs = sorted(intervals, key=lambda iv: (iv.start_t, iv.end_t))
    out: list[tuple[GpsPoint, Mode]] = []
    lo = 0
    for p in track:
        while lo < len(ivs) and ivs[lo].end_t <= p.t:
            lo += 1
        j = lo
        while j < len(ivs) and ivs[j].start_t <= p.t:
            if p.t < ivs[j].end_t:
                out.append((p, ivs[j].mode))
                break
            j += 1
    return out


def split_into_trips(
    labeled: Sequence[tuple[GpsPoint, Mode]]
) -> list[list[tuple[GpsPoint, Mode]]]:
    """Cut the labeled sequence wherever the time gap exceeds 1200 s."""
    trips: list[list[tuple[GpsPoint, Mode]]] = []
    current: list[tuple[GpsPoint, Mode]] = []
    for pair in labeled:
        if current and pair[0].t - current[-1][0].t > TRIP_GAP_SECONDS:
            trips.append(current)
            current = []
        current.append(pair)
    if current:
        trips.append(current)
    return trips


def build_trip(points: Sequence[GpsPoint], labels: Sequence[int]) -> Trip:
    """Assemble a Trip: clean, compute kinematics, smooth, derive targets."""
    if len(points) != len(labels):
        raise ValueError("points / labels length mismatch")
    keep = surviving_indices(points)
    pts = [points[i] for i in keep]
    lab = np.asarray(labels, dtype=np.int64)[keep]
    ks = compute_kinematics(pts)
    features = np.stack(
        [
            smooth_five_spot_triple(ks.speed),
            smooth_five_spot_triple(ks.accel),
            smooth_five_spot_triple(ks.jerk),
        ],
        axis=1,
    )
    cp_indices, cp_coords, _, _ = derive_targets(lab)
    trip = Trip(
        features=features,
        labels=lab,
        points=list(pts),
        cp_indices=cp_indices,
        cp_coords=cp_coords,
    )
    trip.validate()
    return trip


def enforce_length(
    points: Sequence[GpsPoint], labels: Sequence[int]
) -> list[Trip]:
    """Chunk a cleaned point run into trips of length [20, 400].

    Runs longer than 400 become consecutive non-overlapping chunks of
    up to 400 points; any chunk shorter than 20 is dropped.
    """
    if len(points) != len(labels):
        raise ValueError("points / labels length mismatch")
    lab = np.asarray(labels, dtype=np.int64)
    trips = []
    for start in range(0, len(points), N_MAX):
        chunk_pts = list(points[start : start + N_MAX])
        chunk_lab = lab[start : start + N_MAX]
        if len(chunk_pts) < N_MIN:
            continue
        trips.append(build_trip(chunk_pts, chunk_lab))
    return trips


def split_dataset(
    trips: Sequence[Trip], seed: int, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
) -> DatasetSplit:
    """Shuffle deterministically under seed, then partition 7:1:2."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(trips))
    n_train = int(ratios[0] * len(trips))
    n_val = int(ratios[1] * len(trips))
    order = [trips[i] for i in perm]
    return DatasetSplit(
        train=order[:n_train],
        val=order[n_train : n_train + n_val],
        test=order[n_train + n_val :],
        seed=seed,
    )


def pad_batch(trips: Sequence[Trip], n_max: int = N_MAX) -> PaddedBatch:
    """Zero-pad trips to a fixed length with a mask of real points.

    Change-point target coordinates are normalized by n_max, not by the
    trip's own length, so padded and unpadded targets line up.
    """
    b = len(trips)
    features = np.zeros((b, n_max, 3), dtype=np.float64)
    mask = np.zeros((b, n_max), dtype=bool)
    labels = np.full((b, n_max), -1, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    cp_indices = []
    cp_coords_nmax = []
    for i, trip in enumerate(trips):
        n = trip.length
        if n > n_max:
            raise ValueError(f"trip length {n} exceeds n_max {n_max}")
        features[i, :n] = trip.features
        mask[i, :n] = True
        labels[i, :n] = trip.labels
        lengths[i] = n
        cp_indices.append(trip.cp_indices.copy())
        cp_coords_nmax.append(trip.cp_indices / n_max)
    return PaddedBatch(
        features=features,
        mask=mask,
        labels=labels,
        lengths=lengths,
        cp_indices=cp_indices,
        cp_coords_nmax=cp_coords_nmax,
    )


def _trip_record(trip: Trip) -> dict:
    return {
        "features": [[float(v) for v in row] for row in trip.features],
        "labels": [int(v) for v in trip.labels],
        "points": [[p.t, p.lat, p.lng] for p in trip.points],
    }


def _trip_from_record(rec: dict) -> Trip:
    labels = np.asarray(rec["labels"], dtype=np.int64)
    cp_indices, cp_coords, _, _ = derive_targets(labels)
    trip = Trip(
        features=np.asarray(rec["features"], dtype=np.float64),
        labels=labels,
        points=[GpsPoint(t=t, lat=lat, lng=lng) for t, lat, lng in rec["points"]],
        cp_indices=cp_indices,
        cp_coords=cp_coords,
    )
    trip.validate()
    return trip


def save_dataset(trips: Sequence[Trip], fp: TextIO) -> None:
    """Write trips as line-delimited JSON under a versioned header."""
    header = {"format": DATASET_FORMAT, "n_trips": len(trips), "n_classes": NUM_MODES}
    fp.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    for trip in trips:
        fp.write(
            json.dumps(_trip_record(trip), sort_keys=True, separators=(",", ":")) + "\n"
        )


def load_dataset(fp: TextIO) -> list[Trip]:
    """Read a trajseg-dataset-v1 file back into validated trips."""
    first = fp.readline()
    if not first:
        raise ValueError("empty dataset file")
    header = json.loads(first)
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format: {header.get('format')!r}")
    trips = [_trip_from_record(json.loads(line)) for line in fp if line.strip()]
    if len(trips) != header.get("n_trips"):
        raise ValueError("trip count does not match header")
    return trips
