"""Deterministic synthetic labeled-trip generator.

Trips are planned as mode segments with known change points, given
per-segment speed profiles (AR(1) noise around a mode mean, rate-limited
so no sample trips the outlier thresholds), then laid out as GPS points
along a jittered heading. Because labels and change points are known by
construction, the generator doubles as a ground-truth oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geo import GpsPoint, offset_point
from .trips import (
    DatasetSplit,
    Mode,
    N_MAX,
    N_MIN,
    NUM_MODES,
    Trip,
    build_trip,
    split_dataset,
)

# AR(1) pull toward the segment mean speed
_AR_COEFF = 0.3
_HEADING_JITTER_RAD = 0.05
# max speed change per sample: 2.5 m/s^2, a quarter of the outlier bound
_MAX_ACCEL = 2.5
_SPEED_CAP = 79.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generator; defaults give separable but noisy modes."""

    mode_speed_means: tuple[float, ...] = (1.4, 4.0, 7.0, 13.0, 28.0)
    mode_speed_stds: tuple[float, ...] = (0.4, 1.0, 3.0, 4.0, 5.0)
    bus_stop_prob: float = 0.05
    bus_stop_points: tuple[int, int] = (3, 10)
    interval_s: float = 2.0
    length_range: tuple[int, int] = (60, 400)
    cp_count_probs: tuple[float, ...] = (0.3, 0.4, 0.3)
    min_segment_points: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.mode_speed_means) != NUM_MODES or len(self.mode_speed_stds) != NUM_MODES:
            raise ValueError(f"speed profiles must cover all {NUM_MODES} modes")
        means = np.asarray(self.mode_speed_means)
        if np.any(np.diff(means) <= 0):
            raise ValueError("mode speed means must be strictly increasing")
        if np.any(means <= 0) or np.any(np.asarray(self.mode_speed_stds) <= 0):
            raise ValueError("speed means and stds must be positive")
        if self.interval_s <= 0:
            raise ValueError("sampling interval must be positive")
        lo, hi = self.length_range
        if not (N_MIN <= lo <= hi <= N_MAX):
            raise ValueError(f"length_range must satisfy {N_MIN} <= lo <= hi <= {N_MAX}")
        if self.min_segment_points < 1 or self.min_segment_points > lo:
            raise ValueError("min_segment_points must be in [1, length_range lo]")
        probs = np.asarray(self.cp_count_probs)
        if np.any(probs < 0) or probs.sum() <= 0:
            raise ValueError("cp_count_probs must be non-negative and sum > 0")
        if not 0 <= self.bus_stop_prob <= 1:
            raise ValueError("bus_stop_prob must be in [0, 1]")
        s_lo, s_hi = self.bus_stop_points
        if not 1 <= s_lo <= s_hi:
            raise ValueError("bus_stop_points must satisfy 1 <= lo <= hi")


def _plan_segments(
    config: SynthConfig, rng: np.random.Generator, n: int
) -> tuple[list[int], np.ndarray]:
    """Draw (modes, lengths): adjacent modes distinct, lengths >= minimum."""
    min_seg = config.min_segment_points
    allowed = [c for c in range(len(config.cp_count_probs)) if (c + 1) * min_seg <= n]
    probs = np.array([config.cp_count_probs[c] for c in allowed], dtype=np.float64)
    n_cp = int(rng.choice(allowed, p=probs / probs.sum()))
    n_seg = n_cp + 1
    extra = rng.multinomial(n - n_seg * min_seg, np.full(n_seg, 1.0 / n_seg))
    lengths = extra + min_seg
    modes = [int(rng.integers(NUM_MODES))]
    for _ in range(n_cp):
        nxt = int(rng.integers(NUM_MODES - 1))
        if nxt >= modes[-1]:
            nxt += 1
        modes.append(nxt)
    return modes, lengths


def _target_speeds(
    config: SynthConfig, rng: np.random.Generator, modes: Sequence[int], lengths: np.ndarray
) -> np.ndarray:
    """Per-point desired speed: AR(1) around the mode mean, bus stops at 0."""
    out = np.empty(int(np.sum(lengths)), dtype=np.float64)
    pos = 0
    for mode, seg_len in zip(modes, lengths):
        mean = config.mode_speed_means[mode]
        std = config.mode_speed_stds[mode]
        sigma_eps = std * np.sqrt(1.0 - _AR_COEFF**2)
        dev = std * rng.standard_normal()
        stop_left = 0
        for _ in range(int(seg_len)):
            if mode == Mode.BUS:
                if stop_left > 0:
                    stop_left -= 1
                    out[pos] = 0.0
                    pos += 1
                    continue
                if rng.random() < config.bus_stop_prob:
                    lo, hi = config.bus_stop_points
                    stop_left = int(rng.integers(lo, hi + 1)) - 1
                    out[pos] = 0.0
                    pos += 1
                    continue
            out[pos] = max(0.0, mean + dev)
            pos += 1
            dev = _AR_COEFF * dev + sigma_eps * rng.standard_normal()
    return out


def generate_trip(
    config: SynthConfig,
    rng: np.random.Generator,
    plan: tuple[Sequence[int], Sequence[int]] | None = None,
) -> Trip:
    """Generate one trip; labels and change points are known exactly.

    `plan` optionally fixes (segment modes, segment lengths); otherwise
    both are drawn from the config's distributions.
    """
    if plan is None:
        n = int(rng.integers(config.length_range[0], config.length_range[1] + 1))
        modes, lengths = _plan_segments(config, rng, n)
    else:
        modes = [int(m) for m in plan[0]]
        lengths = np.asarray(plan[1], dtype=np.int64)
        if len(modes) != len(lengths) or np.any(lengths < 1):
            raise ValueError("plan segments malformed")
        if any(a == b for a, b in zip(modes, modes[1:])):
            raise ValueError("plan has equal adjacent modes")
        n = int(lengths.sum())
    labels = np.repeat(np.asarray(modes, dtype=np.int64), lengths)

    target = _target_speeds(config, rng, modes, lengths)
    dv_max = _MAX_ACCEL * config.interval_s
    speed = np.empty(n, dtype=np.float64)
    speed[0] = min(target[0], _SPEED_CAP)
    for i in range(1, n):
        speed[i] = float(
            np.clip(target[i], speed[i - 1] - dv_max, speed[i - 1] + dv_max)
        )
        speed[i] = min(max(speed[i], 0.0), _SPEED_CAP)

    heading = rng.uniform(0.0, 2.0 * np.pi)
    lat = 39.0 + rng.uniform(-1.0, 1.0)
    lng = 116.0 + rng.uniform(-1.0, 1.0)
    points = [GpsPoint(t=0.0, lat=lat, lng=lng)]
    for i in range(1, n):
        heading += _HEADING_JITTER_RAD * rng.standard_normal()
        step = speed[i] * config.interval_s
        lat, lng = offset_point(
            lat, lng, step * np.cos(heading), step * np.sin(heading)
        )
        points.append(GpsPoint(t=i * config.interval_s, lat=lat, lng=lng))

    trip = build_trip(points, labels)
    planned_cp = np.cumsum(lengths)[:-1]
    if trip.length != n or not np.array_equal(trip.cp_indices, planned_cp):
        raise RuntimeError("generated trip did not survive preprocessing intact")
    return trip


def generate_trips(config: SynthConfig, n_trips: int) -> list[Trip]:
    """Generate n trips with independent per-trip RNG streams."""
    children = np.random.SeedSequence(config.seed).spawn(n_trips)
    return [generate_trip(config, np.random.default_rng(c)) for c in children]


def generate_dataset(config: SynthConfig, n_trips: int) -> DatasetSplit:
    """Generate trips and partition them 7:1:2 under the config seed."""
    return split_dataset(generate_trips(config, n_trips), seed=config.seed)
