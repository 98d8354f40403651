"""Geodesic distances and kinematic features for GPS tracks.

Distances use Vincenty's inverse formula on WGS-84 with a deterministic
spherical fallback for non-convergent (near-antipodal) pairs. Kinematic
channels are backward differences: the value at index i is computed from
points i-1 and i, and index 0 is forced to zero (a trip starts from
stillness). Outlier removal and five-spot cubic smoothing follow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# WGS-84 ellipsoid
_WGS84_A = 6378137.0
_WGS84_F = 1 / 298.257223563
_WGS84_B = _WGS84_A * (1 - _WGS84_F)

# deterministic fallback sphere (mean Earth radius, meters)
_MEAN_RADIUS = 6371008.8

_VINCENTY_MAX_ITER = 200
_VINCENTY_TOL = 1e-12

SPEED_LIMIT = 80.0    # m/s, outlier threshold
ACCEL_LIMIT = 10.0    # m/s^2, applied to |accel|


class GeodesicFallbackWarning(UserWarning):
    """Vincenty iteration failed to converge; spherical distance used."""


@dataclass(frozen=True)
class GpsPoint:
    """A single GPS fix: timestamp (s since epoch), latitude, longitude."""

    t: float
    lat: float
    lng: float

    def __post_init__(self) -> None:
        for name in ("t", "lat", "lng"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"lng {self.lng} outside [-180, 180]")


@dataclass(frozen=True)
class KinematicSeries:
    """Per-point speed / acceleration / jerk channels for one track."""

    speed: np.ndarray
    accel: np.ndarray
    jerk: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.speed)
        if len(self.accel) != n or len(self.jerk) != n:
            raise ValueError("channel lengths differ")

    @property
    def length(self) -> int:
        return len(self.speed)


def _vincenty_arrays(
    lat1: np.ndarray, lng1: np.ndarray, lat2: np.ndarray, lng2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Vincenty inverse. Returns (meters, fallback_used)."""
    phi1 = np.radians(np.asarray(lat1, dtype=np.float64))
    phi2 = np.radians(np.asarray(lat2, dtype=np.float64))
    lam1 = np.radians(np.asarray(lng1, dtype=np.float64))
    lam2 = np.radians(np.asarray(lng2, dtype=np.float64))

    u1 = np.arctan((1 - _WGS84_F) * np.tan(phi1))
    u2 = np.arctan((1 - _WGS84_F) * np.tan(phi2))
    big_l = lam2 - lam1
    sin_u1, cos_u1 = np.sin(u1), np.cos(u1)
    sin_u2, cos_u2 = np.sin(u2), np.cos(u2)

    identical = (phi1 == phi2) & (lam1 == lam2)
    lam = big_l.copy()
    done = identical.copy()

    sin_sigma = np.zeros_like(lam)
    cos_sigma = np.ones_like(lam)
    sigma = np.zeros_like(lam)
    cos2_alpha = np.ones_like(lam)
    cos_2sm = np.ones_like(lam)

    for _ in range(_VINCENTY_MAX_ITER):
        sin_lam, cos_lam = np.sin(lam), np.cos(lam)
        ss = np.hypot(
            cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam
        )
        cs = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        sg = np.arctan2(ss, cs)
        coincident = ss == 0.0
        sin_alpha = np.where(
            coincident, 0.0, cos_u1 * cos_u2 * sin_lam / np.where(coincident, 1.0, ss)
        )
        c2a = 1.0 - sin_alpha**2
        equatorial = c2a == 0.0
        c2sm = np.where(
            equatorial,
            0.0,
            cs - 2.0 * sin_u1 * sin_u2 / np.where(equatorial, 1.0, c2a),
        )
        c = _WGS84_F / 16.0 * c2a * (4.0 + _WGS84_F * (4.0 - 3.0 * c2a))
        lam_new = big_l + (1.0 - c) * _WGS84_F * sin_alpha * (
            sg + c * ss * (c2sm + c * cs * (-1.0 + 2.0 * c2sm**2))
        )

        upd = ~done
        sin_sigma = np.where(upd, ss, sin_sigma)
        cos_sigma = np.where(upd, cs, cos_sigma)
        sigma = np.where(upd, sg, sigma)
        cos2_alpha = np.where(upd, c2a, cos2_alpha)
        cos_2sm = np.where(upd, c2sm, cos_2sm)

        newly = upd & (np.abs(lam_new - lam) < _VINCENTY_TOL)
        lam = np.where(upd, lam_new, lam)
        done = done | newly | (upd & coincident)
        if bool(done.all()):
            break

    fallback = ~done
    usq = cos2_alpha * (_WGS84_A**2 - _WGS84_B**2) / _WGS84_B**2
    big_a = 1.0 + usq / 16384.0 * (4096.0 + usq * (-768.0 + usq * (320.0 - 175.0 * usq)))
    big_b = usq / 1024.0 * (256.0 + usq * (-128.0 + usq * (74.0 - 47.0 * usq)))
    delta_sigma = big_b * sin_sigma * (
        cos_2sm
        + big_b / 4.0 * (
            cos_sigma * (-1.0 + 2.0 * cos_2sm**2)
            - big_b / 6.0 * cos_2sm
            * (-3.0 + 4.0 * sin_sigma**2) * (-3.0 + 4.0 * cos_2sm**2)
        )
    )
    dist = _WGS84_B * big_a * (sigma - delta_sigma)

    if bool(fallback.any()):
        # spherical law of cosines on the mean-radius sphere
        cos_d = np.clip(
            np.sin(phi1) * np.sin(phi2)
            + np.cos(phi1) * np.cos(phi2) * np.cos(lam2 - lam1),
            -1.0,
            1.0,
        )
        dist = np.where(fallback, _MEAN_RADIUS * np.arccos(cos_d), dist)

    dist = np.where(identical, 0.0, dist)
    return dist, fallback


def vincenty_distance(a: GpsPoint, b: GpsPoint) -> float:
    """Geodesic distance in meters between two points on WGS-84."""
    d, fb = _vincenty_arrays(
        np.array([a.lat]), np.array([a.lng]), np.array([b.lat]), np.array([b.lng])
    )
    if bool(fb[0]):
        warnings.warn(
            "Vincenty did not converge; spherical fallback used",
            GeodesicFallbackWarning,
            stacklevel=2,
        )
    return float(d[0])


def _pair_distances(points: Sequence[GpsPoint]) -> np.ndarray:
    """Distances between consecutive points; length len(points) - 1."""
    if len(points) < 2:
        return np.zeros(0, dtype=np.float64)
    lat = np.array([p.lat for p in points], dtype=np.float64)
    lng = np.array([p.lng for p in points], dtype=np.float64)
    d, fb = _vincenty_arrays(lat[:-1], lng[:-1], lat[1:], lng[1:])
    if bool(fb.any()):
        warnings.warn(
            "Vincenty did not converge for some pairs; spherical fallback used",
            GeodesicFallbackWarning,
            stacklevel=3,
        )
    return d


def offset_point(lat: float, lng: float, north_m: float, east_m: float) -> tuple[float, float]:
    """Shift a coordinate by meters using the local curvature radii.

    First-order accurate for small steps (meters to a few km), which is
    all the trip generator needs; distances are re-measured afterwards
    with vincenty_distance in any case.
    """
    phi = math.radians(lat)
    e2 = _WGS84_F * (2 - _WGS84_F)
    w2 = 1 - e2 * math.sin(phi) ** 2
    meridional = _WGS84_A * (1 - e2) / w2**1.5
    prime_vertical = _WGS84_A / math.sqrt(w2)
    new_lat = lat + math.degrees(north_m / meridional)
    new_lng = lng + math.degrees(east_m / (prime_vertical * math.cos(phi)))
    return new_lat, new_lng


def compute_kinematics(points: Sequence[GpsPoint]) -> KinematicSeries:
    """Backward-difference speed, acceleration and jerk for a track.

    Requires strictly increasing timestamps (run remove_outliers first).
    Index 0 of every channel is exactly 0.
    """
    if len(points) == 0:
        raise ValueError("need at least one point")
    n = len(points)
    speed = np.zeros(n, dtype=np.float64)
    accel = np.zeros(n, dtype=np.float64)
    jerk = np.zeros(n, dtype=np.float64)
    if n > 1:
        t = np.array([p.t for p in points], dtype=np.float64)
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise ValueError("timestamps must be strictly increasing")
        speed[1:] = _pair_distances(points) / dt
        accel[1:] = np.diff(speed) / dt
        jerk[1:] = np.diff(accel) / dt
    return KinematicSeries(speed=speed, accel=accel, jerk=jerk)


def surviving_indices(points: Sequence[GpsPoint]) -> list[int]:
    """Indices kept by the greedy outlier pass (see remove_outliers)."""
    if len(points) == 0:
        return []
    # consecutive-pair distances once, vectorized; scalar calls only
    # for the rare pairs that straddle a dropped point
    d_consec = _pair_distances(points)
    kept: list[int] = [0]
    prev_speed: float | None = None
    for i in range(1, len(points)):
        last_i = kept[-1]
        last, p = points[last_i], points[i]
        dt = p.t - last.t
        if dt <= 0:
            continue
        dist = d_consec[i - 1] if last_i == i - 1 else vincenty_distance(last, p)
        v = dist / dt
        if v > SPEED_LIMIT:
            continue
        if prev_speed is not None and abs(v - prev_speed) / dt > ACCEL_LIMIT:
            continue
        kept.append(i)
        prev_speed = v
    return kept


def remove_outliers(points: Sequence[GpsPoint]) -> list[GpsPoint]:
    """Drop erroneous fixes in one greedy pass.

    A candidate is dropped when, against the last kept point, the time
    step is not positive, the implied speed exceeds 80 m/s, or the
    implied |acceleration| exceeds 10 m/s^2 (checked once a previous
    kept pair exists). Idempotent: kept pairs re-validate unchanged.
    """
    return [points[i] for i in surviving_indices(points)]


# interior 5-point cubic smoothing kernel and one-sided end formulas
_SMOOTH_KERNEL = np.array([-3.0, 12.0, 17.0, 12.0, -3.0]) / 35.0
_EDGE0 = np.array([69.0, 4.0, -6.0, 4.0, -1.0]) / 70.0
_EDGE1 = np.array([2.0, 27.0, 12.0, -8.0, 2.0]) / 35.0


def smooth_five_spot_triple(channel: Sequence[float] | np.ndarray) -> np.ndarray:
    """Five-point cubic smoothing; exact on polynomials of degree <= 3.

    Series shorter than the kernel are returned unchanged. The first and
    last two samples use one-sided cubic-fit coefficients.
    """
    y = np.asarray(channel, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("expected a 1-D series")
    n = len(y)
    if n < 5:
        return y.copy()
    out = np.empty(n, dtype=np.float64)
    out[0] = _EDGE0 @ y[:5]
    out[1] = _EDGE1 @ y[:5]
    out[2:-2] = np.convolve(y, _SMOOTH_KERNEL[::-1], mode="valid")
    out[-2] = _EDGE1 @ y[-5:][::-1]
    out[-1] = _EDGE0 @ y[-5:][::-1]
    return out
