"""Center-pivot kinematics, synthetic sensing and measurement pre-processing.

The pivot arm advances only during its daily irrigation window; the mounted
radiometers look a configurable number of azimuthal sectors ahead of the arm
(the not-yet-irrigated side) and sense the mean moisture of the shallow
nodes of one whole radial line of surface columns.
"""

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import DataError
from .field_model import MeasurementBatch, observe

EARTH_RADIUS_M = 6_371_000.0
SECONDS_PER_DAY = 86_400.0


@dataclass
class PivotSchedule:
    """Rotation and irrigation timetable of the pivot arm.

    ``angular_speed`` is in rad/s of *active* time; the arm is parked outside
    the daily irrigation window (the first ``active_hours`` of each day).
    """

    angular_speed: float
    irrigation_rate: float = 0.0  # m/s while the arm irrigates a sector
    active_hours: float = 8.0
    start_angle: float = 0.0

    def __post_init__(self):
        if self.angular_speed <= 0:
            raise ValueError("angular_speed must be positive")
        if self.irrigation_rate < 0:
            raise ValueError("irrigation_rate must be non-negative")
        if not 0 < self.active_hours <= 24:
            raise ValueError("active_hours must lie in (0, 24]")

    @classmethod
    def from_tip_speed(cls, tip_speed, field_radius, **kwargs):
        """Build from the linear speed of the outer tower (m/s)."""
        return cls(angular_speed=tip_speed / field_radius, **kwargs)


def active_time(t, schedule):
    """Cumulative seconds of pivot operation up to wall-clock time ``t``."""
    window = schedule.active_hours * 3600.0
    days, within = divmod(float(t), SECONDS_PER_DAY)
    return days * window + min(within, window)


def pivot_position(t, schedule, span=2.0 * math.pi):
    """Arm angle (wrapped to [0, span)) and whether the pivot is running."""
    if t < 0:
        raise ValueError("t must be non-negative")
    angle = (schedule.start_angle + schedule.angular_speed * active_time(t, schedule)) % span
    active = (float(t) % SECONDS_PER_DAY) < schedule.active_hours * 3600.0
    return angle, active


def pivot_sector(t, schedule, grid):
    """Azimuthal sector index currently under the arm."""
    angle, _ = pivot_position(t, schedule, grid.theta_span_rad)
    return int(angle / grid.dtheta) % grid.n_theta


def measured_sector(t, schedule, grid, offset=1):
    """Sector observed by the radiometers, ``offset`` sectors ahead of the arm.

    Returns None when a bounded (quadrant) grid has no sector that far ahead.
    """
    if offset < 1:
        raise ValueError("sensor offset must be at least one sector ahead")
    sector = pivot_sector(t, schedule, grid) + offset
    if grid.periodic:
        return sector % grid.n_theta
    return sector if sector < grid.n_theta else None


def measured_nodes(t, schedule, grid, offset=1):
    """Surface columns measured at time t: the whole radial line of the
    sector ahead of the arm (None when that sector is outside the grid)."""
    sector = measured_sector(t, schedule, grid, offset)
    if sector is None:
        return None
    return grid.sector_columns(sector)


def synthesize_measurements(truth, params, grid, node_columns, penetration_nodes, noise_std, rng, time_index=0):
    """Noisy synthetic radiometer batch from a truth state.

    ``rng`` is a seed or a numpy Generator; a fixed seed reproduces the batch
    bit for bit.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    clean = observe(truth, params, grid, node_columns, penetration_nodes)
    noisy = clean + rng.normal(0.0, noise_std, size=clean.shape) if noise_std > 0 else clean
    return MeasurementBatch(
        time_index=time_index,
        node_columns=np.asarray(node_columns, dtype=int),
        penetration_nodes=penetration_nodes,
        values=np.clip(noisy, 0.0, 1.0),
    )


# ---------------------------------------------------------------------------
# raw observation ingestion and pre-processing
# ---------------------------------------------------------------------------


@dataclass
class RawObservation:
    """One raw radiometer reading; either polar or geographic coordinates."""

    timestamp: datetime
    vwc: float
    r: float = None
    theta: float = None
    lat: float = None
    lon: float = None

    def has_polar(self):
        return self.r is not None and self.theta is not None


@dataclass
class GeoReference:
    """Anchors the grid in geographic coordinates: the pivot center location,
    with theta measured counter-clockwise from due east."""

    center_lat: float
    center_lon: float

    def node_latlon(self, r, theta):
        x = r * math.cos(theta)
        y = r * math.sin(theta)
        lat = self.center_lat + math.degrees(y / EARTH_RADIUS_M)
        lon = self.center_lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(self.center_lat))))
        return lat, lon


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def load_observations_csv(path):
    """Read raw observations from delimited text.

    Header must be ``timestamp,lat,lon,vwc`` or ``timestamp,r,theta,vwc``
    with ISO-8601 timestamps.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        names = [f.strip().lower() for f in reader.fieldnames]
        polar = {"timestamp", "r", "theta", "vwc"} <= set(names)
        geographic = {"timestamp", "lat", "lon", "vwc"} <= set(names)
        if not (polar or geographic):
            raise DataError(f"{path}: header must name timestamp,lat,lon,vwc or timestamp,r,theta,vwc")
        for rec in reader:
            rec = {k.strip().lower(): v for k, v in rec.items()}
            ts = datetime.fromisoformat(rec["timestamp"])
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=timezone.utc)
            if polar:
                rows.append(RawObservation(ts, float(rec["vwc"]), r=float(rec["r"]), theta=float(rec["theta"])))
            else:
                rows.append(RawObservation(ts, float(rec["vwc"]), lat=float(rec["lat"]), lon=float(rec["lon"])))
    if not rows:
        raise DataError(f"{path}: no observations")
    return rows


@dataclass
class PreprocessReport:
    """Bookkeeping from the pre-processing pipeline."""

    n_raw: int = 0
    n_outside_region: int = 0
    n_outliers_dropped: int = 0
    n_unmapped: int = 0
    n_batches: int = 0
    n_mapped: int = 0


def preprocess(raw, grid, soil_bounds, t_s, penetration_nodes=1, geo=None, start_time=None):
    """Turn raw readings into time-ordered :class:`MeasurementBatch` objects.

    Pipeline, in order: (1) sort by date then time; (2) keep only readings
    inside the modeled region; (3) group into buckets of ``t_s`` seconds so
    the bucket sequence tracks the pivot movement; (4) drop values above the
    dominant soil's saturated content or below its residual content; (5) map
    each reading to the nearest grid node (great-circle distance for lat/lon
    input, planar polar distance otherwise), averaging duplicates per node.

    ``soil_bounds`` is anything with ``theta_r`` and ``theta_s`` attributes.
    Returns ``(batches, report)``.
    """
    if not raw:
        raise DataError("preprocess called with no observations")
    if t_s <= 0:
        raise ValueError("grouping interval must be positive")
    report = PreprocessReport(n_raw=len(raw))

    ordered = sorted(raw, key=lambda o: o.timestamp)
    t0 = start_time or ordered[0].timestamp

    # node coordinates for mapping
    col_angles = (np.arange(grid.n_theta) + 0.5) * grid.dtheta
    node_r = np.repeat(grid.r_coords, grid.n_theta)
    node_t = np.tile(col_angles, grid.n_r)
    node_x = node_r * np.cos(node_t)
    node_y = node_r * np.sin(node_t)
    if geo is not None:
        node_geo = np.array([geo.node_latlon(r, t) for r, t in zip(node_r, node_t)])

    theta_lo = float(np.asarray(soil_bounds.theta_r).min() if np.ndim(soil_bounds.theta_r) else soil_bounds.theta_r)
    theta_hi = float(np.asarray(soil_bounds.theta_s).max() if np.ndim(soil_bounds.theta_s) else soil_bounds.theta_s)
    margin = 0.5 * grid.dr

    per_bucket = {}
    for obs in ordered:
        if obs.has_polar():
            r, theta = obs.r, obs.theta % (2.0 * math.pi)
            if r < 0 or r > grid.radius_m + margin or theta > grid.theta_span_rad + 0.5 * grid.dtheta:
                report.n_outside_region += 1
                continue
            dist2 = (node_x - r * math.cos(theta)) ** 2 + (node_y - r * math.sin(theta)) ** 2
            nearest = int(np.argmin(dist2))
        else:
            if geo is None:
                raise DataError("geographic observations require a GeoReference")
            d = np.array([haversine_m(obs.lat, obs.lon, la, lo) for la, lo in node_geo])
            nearest = int(np.argmin(d))
            if d[nearest] > max(grid.dr, grid.r_coords[-1] * grid.dtheta):
                report.n_unmapped += 1
                continue
        if not theta_lo <= obs.vwc <= theta_hi:
            report.n_outliers_dropped += 1
            continue
        bucket = int((obs.timestamp - t0).total_seconds() // t_s)
        per_bucket.setdefault(bucket, {}).setdefault(nearest, []).append(obs.vwc)
        report.n_mapped += 1

    batches = []
    for bucket in sorted(per_bucket):
        nodes = sorted(per_bucket[bucket])
        values = np.array([float(np.mean(per_bucket[bucket][n])) for n in nodes])
        batches.append(
            MeasurementBatch(
                time_index=bucket,
                node_columns=np.array(nodes, dtype=int),
                penetration_nodes=penetration_nodes,
                values=values,
            )
        )
    report.n_batches = len(batches)
    return batches, report
