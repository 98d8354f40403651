"""Parsers and directory walker for the GeoLife on-disk layout.

A user directory holds `Trajectory/*.plt` track files (6 header lines,
then CSV rows `lat,lng,0,altitude,days,date,time`) and an optional
`labels.txt` (header line, then tab-separated `start end mode` rows).
Timestamps are interpreted as UTC; only differences matter downstream.
"""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .geo import GpsPoint, surviving_indices
from .trips import (
    LabelInterval,
    Mode,
    Trip,
    enforce_length,
    label_points,
    split_into_trips,
)

PLT_HEADER_LINES = 6

# raw annotation strings that collapse onto the five classes
_MODE_ALIASES = {
    "walk": Mode.WALK,
    "bike": Mode.BIKE,
    "bus": Mode.BUS,
    "car": Mode.CAR,
    "taxi": Mode.CAR,
    "train": Mode.TRAIN,
    "subway": Mode.TRAIN,
}


def map_mode(raw: str) -> Mode | None:
    """Collapse a raw annotation onto one of the five classes, else None."""
    return _MODE_ALIASES.get(raw.strip().lower())


def _epoch_utc(date_s: str, time_s: str, fmt: str) -> float:
    dt = datetime.strptime(f"{date_s} {time_s}", fmt)
    return dt.replace(tzinfo=timezone.utc).timestamp()


def parse_plt(text: str) -> list[GpsPoint]:
    """Parse one PLT file into a chronological point list."""
    lines = text.splitlines()
    if len(lines) < PLT_HEADER_LINES:
        raise ValueError(
            f"PLT file has {len(lines)} lines, expected at least {PLT_HEADER_LINES} header lines"
        )
    points = []
    for lineno, line in enumerate(lines[PLT_HEADER_LINES:], start=PLT_HEADER_LINES + 1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) < 7:
            raise ValueError(f"PLT line {lineno}: expected 7 fields, got {len(fields)}")
        try:
            lat = float(fields[0])
            lng = float(fields[1])
            t = _epoch_utc(fields[5].strip(), fields[6].strip(), "%Y-%m-%d %H:%M:%S")
            points.append(GpsPoint(t=t, lat=lat, lng=lng))
        except ValueError as exc:
            raise ValueError(f"PLT line {lineno}: {exc}") from exc
    points.sort(key=lambda p: p.t)
    return points


def parse_labels(text: str) -> list[LabelInterval]:
    """Parse a labels.txt file; rows with unmapped modes are dropped."""
    lines = text.splitlines()
    if not lines:
        raise ValueError("labels file is empty, expected a header line")
    intervals = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise ValueError(
                f"labels line {lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        mode = map_mode(fields[2])
        if mode is None:
            continue
        try:
            start_t = _epoch_utc(*fields[0].strip().split(" ", 1), "%Y/%m/%d %H:%M:%S")
            end_t = _epoch_utc(*fields[1].strip().split(" ", 1), "%Y/%m/%d %H:%M:%S")
            intervals.append(LabelInterval(start_t=start_t, end_t=end_t, mode=mode))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"labels line {lineno}: {exc}") from exc
    return intervals


def process_track(
    points: Sequence[GpsPoint], intervals: Sequence[LabelInterval]
) -> list[Trip]:
    """Label, split on 1200 s gaps, clean, and cut into [20, 400] trips."""
    labeled = label_points(points, intervals)
    trips = []
    for piece in split_into_trips(labeled):
        pts = [p for p, _ in piece]
        labs = [int(m) for _, m in piece]
        keep = surviving_indices(pts)
        trips.extend(
            enforce_length([pts[i] for i in keep], [labs[i] for i in keep])
        )
    return trips


def ingest_geolife(root: str | Path) -> list[Trip]:
    """Walk a GeoLife tree and return all labeled, preprocessed trips.

    Accepts either the dataset root (containing `Data/`) or the `Data`
    directory itself. Users without labels.txt contribute nothing.
    """
    base = Path(root)
    data = base / "Data" if (base / "Data").is_dir() else base
    if not data.is_dir():
        raise FileNotFoundError(f"no such directory: {base}")
    trips = []
    for user_dir in sorted(p for p in data.iterdir() if p.is_dir()):
        labels_file = user_dir / "labels.txt"
        if not labels_file.is_file():
            continue
        intervals = parse_labels(labels_file.read_text())
        points: list[GpsPoint] = []
        traj_dir = user_dir / "Trajectory"
        if traj_dir.is_dir():
            for plt in sorted(traj_dir.glob("*.plt")):
                points.extend(parse_plt(plt.read_text()))
        points.sort(key=lambda p: p.t)
        trips.extend(process_track(points, intervals))
    return trips
