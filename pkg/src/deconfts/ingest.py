"""Turn raw GPS logs (``entity_id,timestamp,lat,lon``) into a Dataset.

Pipeline: parse -> per-entity sort/dedup -> split on time gaps -> resample to
a uniform grid -> motion features -> fixed-length chunks -> z-score.

Features per resampled segment: speed (m/s), sin and cos of the heading
(clockwise from north). Treatments are first differences of those features,
the outcome is the speed channel, and there is no confounder column.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, ParseError
from .simgen import SCHEMA_VERSION, Dataset, Trajectory

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8
GPS_COLUMNS = ("entity_id", "timestamp", "lat", "lon")
CHANNELS = ("x_0", "x_1", "x_2", "a_0", "a_1", "a_2", "y")


@dataclass(frozen=True)
class GpsPoint:
    entity_id: str
    timestamp: int
    lat: float
    lon: float


@dataclass
class Trip:
    points: list[GpsPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def entity_id(self) -> str:
        return self.points[0].entity_id if self.points else ""


def parse_trajectory_csv(path) -> list[GpsPoint]:
    path = Path(path)
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return points
        for col in GPS_COLUMNS:
            if col not in header:
                raise ParseError("missing required column", path, 1, col)
        idx = {c: header.index(c) for c in GPS_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
            entity = row[idx["entity_id"]].strip()
            if not entity:
                raise ParseError("empty entity id", path, line, "entity_id")
            try:
                ts = int(row[idx["timestamp"]].strip())
            except ValueError:
                raise ParseError(f"bad timestamp {row[idx['timestamp']]!r}", path, line, "timestamp") from None
            coords = {}
            for col, bound in (("lat", 90.0), ("lon", 180.0)):
                raw = row[idx[col]].strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise ParseError(f"bad {col} {raw!r}", path, line, col) from None
                if not (math.isfinite(v) and -bound <= v <= bound):
                    raise ParseError(f"{col}={raw} outside [-{bound:g}, {bound:g}]", path, line, col)
                coords[col] = v
            points.append(GpsPoint(entity, ts, coords["lat"], coords["lon"]))
    return points


def haversine_m(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def heading_rad(lat1, lon1, lat2, lon2):
    """Initial bearing, clockwise from north. Zero for coincident points."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    y = np.sin(dlam) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dlam)
    return np.arctan2(y, x)


def segment_trips(points, gap_threshold_s: int = 900, min_trip_len: int = 10) -> list[Trip]:
    """Split each entity's track wherever consecutive timestamps differ by more than the gap."""
    by_entity: dict[str, list[GpsPoint]] = {}
    for pt in points:
        by_entity.setdefault(pt.entity_id, []).append(pt)
    trips = []
    for entity in by_entity:
        track = sorted(by_entity[entity], key=lambda q: q.timestamp)
        current: list[GpsPoint] = []
        for pt in track:
            if current and pt.timestamp == current[-1].timestamp:
                continue
            if current and pt.timestamp - current[-1].timestamp > gap_threshold_s:
                trips.append(Trip(current))
                current = []
            current.append(pt)
        if current:
            trips.append(Trip(current))
    return [t for t in trips if len(t) >= min_trip_len]


def resample_trip(trip: Trip, resample_interval_s: int = 60):
    """Integer grid ``t0 + i * interval`` with linearly interpolated lat/lon."""
    if len(trip) < 2:
        raise InsufficientDataError("trip needs at least 2 points to resample")
    ts = np.array([p.timestamp for p in trip.points], dtype=np.int64)
    lat = np.array([p.lat for p in trip.points])
    lon = np.array([p.lon for p in trip.points])
    n = int((ts[-1] - ts[0]) // resample_interval_s) + 1
    grid = ts[0] + resample_interval_s * np.arange(n, dtype=np.int64)
    return grid, np.interp(grid, ts, lat), np.interp(grid, ts, lon)


def featurize_trip(trip: Trip, resample_interval_s: int = 60) -> Trajectory:
    """Raw (unnormalised) features; one row per resampled segment after the first."""
    grid, lat, lon = resample_trip(trip, resample_interval_s)
    if len(grid) < 3:
        raise InsufficientDataError(f"trip resamples to {len(grid)} grid points, need at least 3")
    dist = haversine_m(lat[:-1], lon[:-1], lat[1:], lon[1:])
    heading = heading_rad(lat[:-1], lon[:-1], lat[1:], lon[1:])
    X = np.column_stack([dist / resample_interval_s, np.sin(heading), np.cos(heading)])
    A = np.diff(X, axis=0)
    X = X[1:]
    return Trajectory(X=X, A=A, Y=X[:, 0].copy(), Z=None)


def _chunks(traj: Trajectory, seq_len: int) -> list[Trajectory]:
    out = []
    for start in range(0, traj.T - seq_len + 1, seq_len):
        s = slice(start, start + seq_len)
        out.append(Trajectory(X=traj.X[s], A=traj.A[s], Y=traj.Y[s], Z=None))
    return out


def normalize_trajectories(trajs: list[Trajectory]):
    """Z-score every channel over all rows; returns new trajectories and the constants."""
    if not trajs:
        return [], {}
    X = np.concatenate([t.X for t in trajs])
    A = np.concatenate([t.A for t in trajs])
    Y = np.concatenate([t.Y for t in trajs])
    stats = {}
    cols = [X[:, j] for j in range(X.shape[1])] + [A[:, j] for j in range(A.shape[1])] + [Y]
    for name, col in zip(CHANNELS, cols):
        std = float(col.std())
        stats[name] = {"mean": float(col.mean()), "std": std if std > 0 else 1.0}
    mx = np.array([stats[f"x_{j}"]["mean"] for j in range(3)])
    sx = np.array([stats[f"x_{j}"]["std"] for j in range(3)])
    ma = np.array([stats[f"a_{j}"]["mean"] for j in range(3)])
    sa = np.array([stats[f"a_{j}"]["std"] for j in range(3)])
    my, sy = stats["y"]["mean"], stats["y"]["std"]
    out = [Trajectory(X=(t.X - mx) / sx, A=(t.A - ma) / sa, Y=(t.Y - my) / sy, Z=None) for t in trajs]
    return out, stats


def build_dataset(
    trips: list[Trip],
    resample_interval_s: int = 60,
    seq_len: int = 60,
    provenance: dict | None = None,
) -> Dataset:
    """Featurise, cut into ``seq_len`` chunks and normalise. Short trips are skipped and logged."""
    chunks, skipped = [], 0
    for i, trip in enumerate(trips):
        try:
            traj = featurize_trip(trip, resample_interval_s)
        except InsufficientDataError as exc:
            logger.info("skipping trip %d (entity %s): %s", i, trip.entity_id, exc)
            skipped += 1
            continue
        if traj.T < seq_len:
            logger.info("skipping trip %d (entity %s): %d feature rows < seq_len %d", i, trip.entity_id, traj.T, seq_len)
            skipped += 1
            continue
        chunks.extend(_chunks(traj, seq_len))
    normed, stats = normalize_trajectories(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "source": "ingest",
        "resample_interval_s": resample_interval_s,
        "seq_len": seq_len,
        "n_trips": len(trips),
        "n_trips_skipped": skipped,
        "normalization": stats,
        "T": seq_len,
        "k": 3,
    }
    manifest.update(provenance or {})
    return Dataset(normed, manifest)


def ingest_csv(path, gap_threshold_s: int = 900, min_trip_len: int = 10,
               resample_interval_s: int = 60, seq_len: int = 60) -> Dataset:
    points = parse_trajectory_csv(path)
    trips = segment_trips(points, gap_threshold_s, min_trip_len)
    provenance = {"input": str(path), "gap_threshold_s": gap_threshold_s, "min_trip_len": min_trip_len,
                  "n_points": len(points)}
    return build_dataset(trips, resample_interval_s, seq_len, provenance)
