"""Declarative experiment configuration (TOML) and parameter-field builders.

All internal computation is SI (metres, seconds); config keys carry explicit
unit suffixes (``_mm_per_day``, ``_cm_per_hr``, ``_deg`` and so on) and are
converted exactly once here, at ingestion.
"""

import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - environment dependent
    import tomli as tomllib

from ..assimilation import NoiseSpec
from ..errors import ConfigError
from ..field_model import CylGrid, FeddesParams, ParameterField, SolverOptions
from ..hydraulics import PARAM_KINDS, SoilHydraulics
from ..pivot import PivotSchedule
from .weather import CropModel, WeatherRecord, load_weather_csv

SECONDS_PER_DAY = 86_400.0

K_S_CONVERTERS = {
    "k_s_m_per_s": 1.0,
    "k_s_m_per_day": 1.0 / SECONDS_PER_DAY,
    "k_s_cm_per_hr": 0.01 / 3600.0,
}


@dataclass
class SoilFieldSpec:
    """How one ParameterField is produced (uniform, random or perturbed)."""

    mode: str = "uniform"  # uniform | random | perturb-truth
    k_s: float = 7.222e-7
    theta_s: float = 0.410
    theta_r: float = 0.090
    alpha: float = 1.90
    n: float = 1.31
    rel_std: dict = field(default_factory=dict)  # kind -> relative spread (random mode)
    smoothing_passes: int = 2
    perturb_low: float = 1.10
    perturb_high: float = 1.15


@dataclass
class ExperimentConfig:
    """Everything needed to run simulation, estimation and validation."""

    # horizon
    days: float = 3.0
    dt_s: float = 360.0
    seed: int = 7
    start: datetime = datetime(2021, 6, 3)
    # geometry
    n_r: int = 10
    n_theta: int = 8
    n_z: int = 5
    radius_m: float = 50.0
    depth_m: float = 0.3
    theta_span_rad: float = 2.0 * math.pi
    z_coords: object = None
    # soil
    s_r: float = 1e-4
    nominal_soil: SoilFieldSpec = field(default_factory=SoilFieldSpec)
    truth_soil: SoilFieldSpec = field(default_factory=SoilFieldSpec)
    # pivot and sensing
    angular_speed: float = None  # rad/s; default set against dt below
    irrigation_rate: float = 3.6e-3 / (8 * 3600.0)
    active_hours: float = 8.0
    start_angle: float = 0.0
    noise_std: float = 0.01
    penetration_nodes: int = None  # default: layers in the top 5 cm
    penetration_depth_m: float = 0.05
    offset_sectors: int = 1
    t_s: float = 600.0
    # weather / crop
    weather: list = None
    crop: CropModel = field(default_factory=CropModel)
    evaporation_fraction: float = 0.3
    root_depth_m: float = 0.15
    # initial condition
    head_low: float = -1.5
    head_high: float = -1.35
    # estimation
    case: int = 3
    noise_spec: NoiseSpec = None
    process_noise_std: float = 1e-6
    gate_confidence: float = None
    kriging_min_samples: int = 5
    selection_mode: str = "measured-nodes"  # or "pipeline"
    sensitivity_rotations: int = 6
    gap_decades: float = 3.0
    # validation
    split_fraction: float = 0.2
    holdout_day: int = None
    # solver
    solver: SolverOptions = None

    def __post_init__(self):
        if self.case not in (1, 2, 3):
            raise ConfigError("case must be 1, 2 or 3")
        if not 0 <= self.split_fraction < 1:
            raise ConfigError("validation split fraction must lie in [0, 1)")
        if self.noise_spec is None:
            self.noise_spec = NoiseSpec(
                q_state=1e-12,
                r_unit=1e-4,
                p0_state=0.04,
                p0_param={"k_s": 0.25, "theta_s": 2e-3, "theta_r": 1e-3, "alpha": 0.04, "n": 2e-3},
            )
        if self.angular_speed is None:
            # one azimuthal sector per time step while the pivot runs
            self.angular_speed = (self.theta_span_rad / self.n_theta) / self.dt_s
        if self.weather is None:
            self.weather = default_weather(self.start, self.n_days_total)
        if self.solver is None:
            self.solver = SolverOptions(root_depth_m=self.root_depth_m, feddes=FeddesParams())

    @property
    def n_steps(self):
        return int(round(self.days * SECONDS_PER_DAY / self.dt_s))

    @property
    def n_days_total(self):
        return int(math.ceil(self.days)) + 1

    def grid(self):
        return CylGrid(
            n_r=self.n_r,
            n_theta=self.n_theta,
            n_z=self.n_z,
            radius_m=self.radius_m,
            depth_m=self.depth_m,
            theta_span_rad=self.theta_span_rad,
            z_coords=None if self.z_coords is None else np.asarray(self.z_coords, dtype=float),
        )

    def schedule(self):
        return PivotSchedule(
            angular_speed=self.angular_speed,
            irrigation_rate=self.irrigation_rate,
            active_hours=self.active_hours,
            start_angle=self.start_angle,
        )

    def penetration(self, grid):
        if self.penetration_nodes is not None:
            return self.penetration_nodes
        return grid.penetration_nodes_for_depth(self.penetration_depth_m)


def default_weather(start, n_days):
    """The shipped synthetic-case weather: five daily reference ET values
    cycled for as many days as needed, no rain, mild temperatures."""
    et0_cycle = [1.5e-3, 1.9e-3, 0.6e-3, 0.8e-3, 2.4e-3]
    out = []
    for day in range(n_days):
        out.append(
            WeatherRecord(
                date=(start + timedelta(days=day)).date(),
                t_avg_c=15.0,
                et0_m_per_day=et0_cycle[day % len(et0_cycle)],
                precip_m_per_day=0.0,
            )
        )
    return out


def smooth_surface_noise(grid, rng, passes=2):
    """Unit-variance smooth random field over the surface columns."""
    noise = rng.standard_normal((grid.n_r, grid.n_theta))
    for _ in range(passes):
        acc = noise.copy()
        acc += np.roll(noise, 1, axis=1) + np.roll(noise, -1, axis=1)
        radial_up = np.vstack([noise[1:], noise[-1:]])
        radial_dn = np.vstack([noise[:1], noise[:-1]])
        noise = (acc + radial_up + radial_dn) / 5.0
    noise -= noise.mean()
    std = noise.std()
    if std > 0:
        noise /= std
    return noise.reshape(-1)


def build_parameter_field(spec, grid, s_r, rng, truth_field=None):
    """Materialize one ParameterField from its declarative spec."""
    cols = grid.n_columns
    base = {"k_s": spec.k_s, "theta_s": spec.theta_s, "theta_r": spec.theta_r, "alpha": spec.alpha, "n": spec.n}
    if spec.mode == "uniform":
        fields = {k: np.full(cols, float(v)) for k, v in base.items()}
    elif spec.mode == "random":
        fields = {}
        for kind, value in base.items():
            rel = float(spec.rel_std.get(kind, 0.0))
            bump = smooth_surface_noise(grid, rng, spec.smoothing_passes) if rel > 0 else 0.0
            fields[kind] = np.full(cols, float(value)) * np.exp(rel * bump)
    elif spec.mode == "perturb-truth":
        if truth_field is None:
            raise ConfigError("perturb-truth mode requires a truth field")
        fields = {}
        for kind in PARAM_KINDS:
            factors = rng.uniform(spec.perturb_low, spec.perturb_high, size=cols)
            fields[kind] = np.asarray(truth_field.params.kind(kind)) * factors
    else:
        raise ConfigError(f"unknown soil field mode {spec.mode!r}")
    # keep the retention endpoints physically ordered
    fields["theta_s"] = np.clip(fields["theta_s"], 0.25, 0.60)
    fields["theta_r"] = np.minimum(np.clip(fields["theta_r"], 0.005, 0.20), fields["theta_s"] - 0.05)
    fields["n"] = np.clip(fields["n"], 1.05, 3.5)
    return ParameterField(SoilHydraulics(s_r=s_r, **fields), cols)


def _soil_spec_from(table):
    spec = SoilFieldSpec()
    spec.mode = table.get("mode", "uniform")
    for key, conv in K_S_CONVERTERS.items():
        if key in table:
            spec.k_s = float(table[key]) * conv
    spec.theta_s = float(table.get("theta_s", spec.theta_s))
    spec.theta_r = float(table.get("theta_r", spec.theta_r))
    spec.alpha = float(table.get("alpha_per_m", spec.alpha))
    spec.n = float(table.get("n", spec.n))
    spec.rel_std = {k: float(v) for k, v in table.get("rel_std", {}).items()}
    spec.smoothing_passes = int(table.get("smoothing_passes", spec.smoothing_passes))
    spec.perturb_low = float(table.get("perturb_low", spec.perturb_low))
    spec.perturb_high = float(table.get("perturb_high", spec.perturb_high))
    return spec


def load_config(path, seed_override=None, case_override=None):
    """Parse a TOML experiment file into an :class:`ExperimentConfig`."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None

    try:
        return _config_from_tables(raw, seed_override, case_override)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def _config_from_tables(raw, seed_override=None, case_override=None):
    cfg = ExperimentConfig.__new__(ExperimentConfig)
    run = raw.get("run", {})
    grid_t = raw.get("grid", {})
    soil = raw.get("soil", {})
    pivot = raw.get("pivot", {})
    sensor = raw.get("sensor", {})
    weather_t = raw.get("weather", {})
    initial = raw.get("initial", {})
    filt = raw.get("filter", {})
    sens_t = raw.get("sensitivity", {})
    select_t = raw.get("selection", {})
    valid_t = raw.get("validation", {})

    cfg.days = float(run.get("days", 3.0))
    cfg.dt_s = float(run.get("dt_minutes", 6.0)) * 60.0 if "dt_minutes" in run else float(run.get("dt_s", 360.0))
    cfg.seed = int(seed_override if seed_override is not None else run.get("seed", 7))
    cfg.start = datetime.fromisoformat(run.get("start", "2021-06-03T00:00:00"))

    cfg.n_r = int(grid_t.get("n_r", 10))
    cfg.n_theta = int(grid_t.get("n_theta", 8))
    cfg.n_z = int(grid_t.get("n_z", 5))
    cfg.radius_m = float(grid_t.get("radius_m", 50.0))
    cfg.depth_m = float(grid_t.get("depth_m", 0.3))
    if "theta_span_deg" in grid_t:
        cfg.theta_span_rad = math.radians(float(grid_t["theta_span_deg"]))
    else:
        cfg.theta_span_rad = float(grid_t.get("theta_span_rad", 2.0 * math.pi))
    cfg.z_coords = grid_t.get("z_coords")

    cfg.s_r = float(soil.get("s_r", 1e-4))
    cfg.nominal_soil = _soil_spec_from(soil.get("nominal", {}))
    cfg.truth_soil = _soil_spec_from(soil.get("truth", soil.get("nominal", {})))

    if "angular_speed_rad_per_s" in pivot:
        cfg.angular_speed = float(pivot["angular_speed_rad_per_s"])
    elif "tip_speed_m_per_s" in pivot:
        cfg.angular_speed = float(pivot["tip_speed_m_per_s"]) / cfg.radius_m
    else:
        cfg.angular_speed = None
    cfg.active_hours = float(pivot.get("active_hours", 8.0))
    rate_mm_day = float(pivot.get("irrigation_mm_per_day", 3.6))
    cfg.irrigation_rate = rate_mm_day * 1e-3 / (cfg.active_hours * 3600.0)
    cfg.start_angle = math.radians(float(pivot.get("start_angle_deg", 0.0)))

    cfg.noise_std = float(sensor.get("noise_std_vwc", 0.01))
    cfg.penetration_nodes = sensor.get("penetration_nodes")
    if cfg.penetration_nodes is not None:
        cfg.penetration_nodes = int(cfg.penetration_nodes)
    cfg.penetration_depth_m = float(sensor.get("penetration_depth_cm", 5.0)) / 100.0
    cfg.offset_sectors = int(sensor.get("offset_sectors", 1))
    cfg.t_s = float(sensor.get("t_s_minutes", 10.0)) * 60.0

    cfg.crop = CropModel(
        kc_mode=weather_t.get("kc_mode", "constant"),
        kc_values=tuple(np.atleast_1d(weather_t.get("kc", 0.85)).astype(float)),
        t_base_c=float(weather_t.get("t_base_c", 5.0)),
    )
    cfg.evaporation_fraction = float(weather_t.get("evaporation_fraction", 0.3))
    cfg.root_depth_m = float(weather_t.get("root_depth_m", 0.15))
    cfg.head_low = float(initial.get("head_low_m", -1.5))
    cfg.head_high = float(initial.get("head_high_m", -1.35))

    cfg.case = int(case_override if case_override is not None else filt.get("case", 3))
    p0_param = filt.get("p0_param", {"k_s": 0.25, "theta_s": 2e-3, "theta_r": 1e-3, "alpha": 0.04, "n": 2e-3})
    if isinstance(p0_param, dict):
        p0_param = {k: float(v) for k, v in p0_param.items()}
    else:
        p0_param = float(p0_param)
    cfg.noise_spec = NoiseSpec(
        q_state=float(filt.get("q_state", 1e-12)),
        q_param=float(filt.get("q_param", 0.0)),
        r_unit=float(filt.get("r", 1e-4)),
        p0_state=float(filt.get("p0_state", 0.04)),
        p0_param=p0_param,
    )
    cfg.process_noise_std = float(filt.get("process_noise_std_m", 1e-6))
    gate = float(filt.get("gate_confidence", 0.0))
    cfg.gate_confidence = gate if gate > 0 else None
    cfg.kriging_min_samples = int(filt.get("kriging_min_samples", 5))

    cfg.sensitivity_rotations = int(sens_t.get("rotations", 6))
    cfg.gap_decades = float(sens_t.get("gap_decades", 3.0))
    cfg.selection_mode = select_t.get("mode", "measured-nodes")
    cfg.split_fraction = float(valid_t.get("split_fraction", 0.2))
    cfg.holdout_day = valid_t.get("holdout_day")
    if cfg.holdout_day is not None:
        cfg.holdout_day = int(cfg.holdout_day)

    cfg.weather = None
    cfg.solver = None
    cfg.__post_init__()
    if "csv" in weather_t:
        cfg.weather = load_weather_csv(weather_t["csv"])
        needed = cfg.n_days_total
        if len(cfg.weather) < needed:
            raise ConfigError(f"weather csv covers {len(cfg.weather)} days, horizon needs {needed}")
    elif "et0_mm_per_day" in weather_t:
        et0 = [float(v) * 1e-3 for v in weather_t["et0_mm_per_day"]]
        precip = [float(v) * 1e-3 for v in weather_t.get("precip_mm_per_day", [0.0])]
        t_avg = [float(v) for v in weather_t.get("t_avg_c", [15.0])]
        cfg.weather = [
            WeatherRecord(
                date=(cfg.start + timedelta(days=d)).date(),
                t_avg_c=t_avg[d % len(t_avg)],
                et0_m_per_day=et0[d % len(et0)],
                precip_m_per_day=precip[d % len(precip)],
            )
            for d in range(cfg.n_days_total)
        ]
    return cfg
