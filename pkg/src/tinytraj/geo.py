"""GPS trajectories and their reversible model-space encodings.

A trajectory is a sequence of (lat, lon, t) fixes.  For modeling, positions
are normalized around the corpus center, timestamps are split into calendar
components, and consecutive points are reduced to (dlat, dlon, dt) deltas so
the model predicts motion rather than absolute position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DT_DIVISOR_S",
    "FEATURE_DIM",
    "SPATIAL_SLOTS",
    "TEMPORAL_SLOTS",
    "DeltaSequence",
    "FeatureSequence",
    "NormalizationParams",
    "PointFeatures",
    "TrajPoint",
    "Trajectory",
    "compute_center",
    "decompose_time",
    "delta_encode",
    "delta_decode",
    "denormalize",
    "featurize",
    "normalize",
    "point_features",
]

# Feature layout for one point:
#   0: x (normalized lon offset)      \ spatial slots
#   1: y (normalized lat offset)      /
#   2: day of week / 7   (Monday = 0) \
#   3: hour of day / 24                | temporal slots
#   4: minute of hour / 60             |
#   5: second of minute / 60           |
#   6: dt to previous point / 60 s    /
FEATURE_DIM = 7
SPATIAL_SLOTS = slice(0, 2)
TEMPORAL_SLOTS = slice(2, 7)
DT_FEATURE_INDEX = 6
DT_DIVISOR_S = 60.0  # fixed interval scale: one minute
_MIN_SCALE = 1e-6


@dataclass(frozen=True)
class TrajPoint:
    """One GPS fix: latitude/longitude in degrees, unix time in whole seconds."""

    lat: float
    lon: float
    t: int

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not isinstance(self.t, (int, np.integer)) or isinstance(self.t, bool):
            raise ValueError(f"timestamp must be an integer, got {self.t!r}")
        if self.t < 0:
            raise ValueError(f"timestamp {self.t} is negative")
        object.__setattr__(self, "t", int(self.t))


@dataclass
class Trajectory:
    """An identified sequence of at least two fixes with strictly increasing time."""

    id: str
    points: list[TrajPoint]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError(f"trajectory {self.id!r} has {len(self.points)} points, need >= 2")
        for i in range(1, len(self.points)):
            if self.points[i].t <= self.points[i - 1].t:
                raise ValueError(
                    f"trajectory {self.id!r}: time not strictly increasing at index {i}"
                )

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class NormalizationParams:
    """Corpus center and per-axis spread used to map degrees to model units."""

    center_lat: float
    center_lon: float
    scale_lat: float
    scale_lon: float

    def __post_init__(self):
        if not (self.scale_lat > 0 and self.scale_lon > 0):
            raise ValueError("scales must be positive")

    def to_dict(self) -> dict:
        return {
            "center_lat": self.center_lat,
            "center_lon": self.center_lon,
            "scale_lat": self.scale_lat,
            "scale_lon": self.scale_lon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(
            center_lat=float(d["center_lat"]),
            center_lon=float(d["center_lon"]),
            scale_lat=float(d["scale_lat"]),
            scale_lon=float(d["scale_lon"]),
        )

    def approx_equal(self, other: "NormalizationParams", tol: float = 1e-9) -> bool:
        return (
            abs(self.center_lat - other.center_lat) <= tol
            and abs(self.center_lon - other.center_lon) <= tol
            and abs(self.scale_lat - other.scale_lat) <= tol
            and abs(self.scale_lon - other.scale_lon) <= tol
        )


@dataclass(frozen=True)
class PointFeatures:
    """Per-point model features: normalized offsets plus calendar components."""

    x: float  # (lon - center_lon) / scale_lon
    y: float  # (lat - center_lat) / scale_lat
    dow: int  # day of week, Monday = 0
    hod: int  # hour of day
    moh: int  # minute of hour
    soh: int  # second of minute

    @property
    def dow_scaled(self) -> float:
        return self.dow / 7.0

    @property
    def hod_scaled(self) -> float:
        return self.hod / 24.0

    @property
    def moh_scaled(self) -> float:
        return self.moh / 60.0

    @property
    def soh_scaled(self) -> float:
        return self.soh / 60.0


@dataclass
class DeltaSequence:
    """First point plus consecutive (dlat deg, dlon deg, dt s) steps."""

    traj_id: str
    origin: TrajPoint
    deltas: list[tuple[float, float, int]]
    origin_features: PointFeatures | None = None

    def __post_init__(self):
        for i, (_, _, dt) in enumerate(self.deltas):
            if dt <= 0:
                raise ValueError(f"delta {i}: dt must be positive, got {dt}")


@dataclass
class FeatureSequence:
    """Featurized trajectory: per-point vectors plus parallel delta targets.

    ``targets[i]`` is the normalized step from point i to point i+1
    (dlat/scale_lat, dlon/scale_lon, dt/60); the final row is zero because the
    last point has no successor.
    """

    traj_id: str
    features: np.ndarray  # [S, FEATURE_DIM]
    targets: np.ndarray  # [S, 3]
    deltas: DeltaSequence = field(repr=False)

    def __len__(self) -> int:
        return self.features.shape[0]


def compute_center(trajectories: Iterable[Trajectory]) -> NormalizationParams:
    """Mean center and per-axis population std over every point, streamed.

    Scales are floored at 1e-6 degrees so degenerate (constant-axis) corpora
    still normalize.  Raises on an empty corpus.
    """
    # Welford's online moments: one pass, constant memory, and no
    # sum-of-squares cancellation (keeps normalization translation-covariant
    # to well under 1e-9)
    n = 0
    mean_lat = mean_lon = m2_lat = m2_lon = 0.0
    for traj in trajectories:
        for p in traj.points:
            n += 1
            d_lat = p.lat - mean_lat
            mean_lat += d_lat / n
            m2_lat += d_lat * (p.lat - mean_lat)
            d_lon = p.lon - mean_lon
            mean_lon += d_lon / n
            m2_lon += d_lon * (p.lon - mean_lon)
    if n == 0:
        raise ValueError("cannot fit normalization on an empty corpus")
    var_lat = m2_lat / n
    var_lon = m2_lon / n
    return NormalizationParams(
        center_lat=mean_lat,
        center_lon=mean_lon,
        scale_lat=max(float(np.sqrt(var_lat)), _MIN_SCALE),
        scale_lon=max(float(np.sqrt(var_lon)), _MIN_SCALE),
    )


def normalize(p: TrajPoint, params: NormalizationParams) -> tuple[float, float]:
    """Map a point to normalized (x, y) offsets from the corpus center."""
    x = (p.lon - params.center_lon) / params.scale_lon
    y = (p.lat - params.center_lat) / params.scale_lat
    return x, y


def denormalize(x: float, y: float, params: NormalizationParams) -> tuple[float, float]:
    """Inverse of ``normalize``; returns (lat, lon) in degrees."""
    lat = params.center_lat + y * params.scale_lat
    lon = params.center_lon + x * params.scale_lon
    return lat, lon


def decompose_time(t: int) -> tuple[int, int, int, int]:
    """Split a unix timestamp into UTC (dow, hod, moh, soh), Monday = 0."""
    if t < 0:
        raise ValueError(f"timestamp {t} is negative")
    dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
    return dt.weekday(), dt.hour, dt.minute, dt.second


def point_features(p: TrajPoint, params: NormalizationParams) -> PointFeatures:
    x, y = normalize(p, params)
    dow, hod, moh, soh = decompose_time(p.t)
    return PointFeatures(x=x, y=y, dow=dow, hod=hod, moh=moh, soh=soh)


def delta_encode(traj: Trajectory) -> DeltaSequence:
    """Reduce a trajectory to its origin plus per-step (dlat, dlon, dt).

    Rejects non-monotone timestamps, naming the first violating index.
    """
    pts = traj.points
    deltas: list[tuple[float, float, int]] = []
    for i in range(1, len(pts)):
        dt = pts[i].t - pts[i - 1].t
        if dt <= 0:
            raise ValueError(f"trajectory {traj.id!r}: time not strictly increasing at index {i}")
        deltas.append((pts[i].lat - pts[i - 1].lat, pts[i].lon - pts[i - 1].lon, int(dt)))
    return DeltaSequence(traj_id=traj.id, origin=pts[0], deltas=deltas)


def delta_decode(ds: DeltaSequence) -> Trajectory:
    """Rebuild the trajectory from origin and deltas (inverse of delta_encode)."""
    pts = [ds.origin]
    lat, lon, t = ds.origin.lat, ds.origin.lon, ds.origin.t
    for dlat, dlon, dt in ds.deltas:
        lat += dlat
        lon += dlon
        t += int(dt)
        pts.append(TrajPoint(lat=lat, lon=lon, t=t))
    return Trajectory(id=ds.traj_id, points=pts)


def featurize(traj: Trajectory, params: NormalizationParams) -> FeatureSequence:
    """Build the [S, 7] model input matrix and [S, 3] normalized delta targets.

    Feature columns: x, y, dow/7, hod/24, moh/60, soh/60, dt_prev/60 (0 for
    the first point).  Targets are the *next* step per position, normalized
    the same way positions are (spatial deltas by the axis scales, dt by 60 s).
    """
    ds = delta_encode(traj)
    s = len(traj.points)
    feats = np.zeros((s, FEATURE_DIM), dtype=np.float64)
    targets = np.zeros((s, 3), dtype=np.float64)
    origin_feats: PointFeatures | None = None
    for i, p in enumerate(traj.points):
        pf = point_features(p, params)
        if i == 0:
            origin_feats = pf
        dt_prev = 0.0 if i == 0 else ds.deltas[i - 1][2] / DT_DIVISOR_S
        feats[i] = (pf.x, pf.y, pf.dow_scaled, pf.hod_scaled, pf.moh_scaled, pf.soh_scaled, dt_prev)
        if i < s - 1:
            dlat, dlon, dt = ds.deltas[i]
            targets[i] = (dlat / params.scale_lat, dlon / params.scale_lon, dt / DT_DIVISOR_S)
    ds.origin_features = origin_feats
    return FeatureSequence(traj_id=traj.id, features=feats, targets=targets, deltas=ds)
