"""Weather ingestion, crop coefficient and per-step surface forcing."""

import csv
from dataclasses import dataclass
from datetime import date as date_type
from datetime import datetime

import numpy as np

from ..errors import DataError, MissingWeather
from ..field_model import SurfaceForcing
from ..pivot import pivot_position, pivot_sector

SECONDS_PER_DAY = 86_400.0

# barley crop-coefficient polynomial in cumulative growing-degree days
KC_COEFFS = (0.04217, 1.508e-3, 4.89e-6, -8.69e-9, 2.49e-12)
KC_MIN, KC_MAX = 0.04, 1.2


@dataclass
class WeatherRecord:
    """One day of ancillary weather inputs (SI-converted at ingestion)."""

    date: date_type
    t_avg_c: float
    et0_m_per_day: float
    precip_m_per_day: float

    def __post_init__(self):
        if self.et0_m_per_day < 0 or self.precip_m_per_day < 0:
            raise ValueError("et0 and precipitation must be non-negative")


def load_weather_csv(path):
    """Read `date,t_avg_c,et0_mm_day,precip_mm_day` (header required)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"date", "t_avg_c", "et0_mm_day", "precip_mm_day"} - set(
            f.strip().lower() for f in reader.fieldnames
        ):
            raise DataError(f"{path}: header must be date,t_avg_c,et0_mm_day,precip_mm_day")
        for rec in reader:
            rec = {k.strip().lower(): v for k, v in rec.items()}
            records.append(
                WeatherRecord(
                    date=datetime.fromisoformat(rec["date"]).date(),
                    t_avg_c=float(rec["t_avg_c"]),
                    et0_m_per_day=float(rec["et0_mm_day"]) / 1000.0,
                    precip_m_per_day=float(rec["precip_mm_day"]) / 1000.0,
                )
            )
    if not records:
        raise DataError(f"{path}: no weather records")
    return records


def gdd(t_avg_c, t_base_c=5.0):
    """Daily growing-degree days, floored at zero (growth cannot reverse)."""
    return max(t_avg_c - t_base_c, 0.0)


def crop_coefficient(gdd_cum):
    """Barley crop coefficient from cumulative degree-days, clipped to
    [0.04, 1.2] (the polynomial plunges for very large arguments)."""
    if gdd_cum < 0:
        raise ValueError("cumulative degree-days cannot be negative")
    g = float(gdd_cum)
    value = sum(c * g**k for k, c in enumerate(KC_COEFFS))
    return float(np.clip(value, KC_MIN, KC_MAX))


@dataclass
class CropModel:
    """Turns a daily weather series into crop-coefficient values.

    ``kc_mode`` is either "constant" (use ``kc_values`` cycled per day) or
    "gdd" (accumulate degree-days and evaluate the crop polynomial).
    """

    kc_mode: str = "constant"
    kc_values: tuple = (0.85,)
    t_base_c: float = 5.0

    def kc_series(self, weather):
        if self.kc_mode == "constant":
            return [float(self.kc_values[i % len(self.kc_values)]) for i in range(len(weather))]
        cum = 0.0
        out = []
        for rec in weather:
            cum += gdd(rec.t_avg_c, self.t_base_c)
            out.append(crop_coefficient(cum))
        return out


class ForcingBuilder:
    """Per-step surface forcing from weather, crop state and the pivot."""

    def __init__(self, grid, schedule, weather, crop=None, evaporation_fraction=0.3):
        self.grid = grid
        self.schedule = schedule
        self.weather = list(weather)
        self.crop = crop or CropModel()
        self.evaporation_fraction = evaporation_fraction
        self.kc = self.crop.kc_series(self.weather)

    def day_record(self, t_seconds):
        day = int(t_seconds // SECONDS_PER_DAY)
        if day >= len(self.weather):
            raise MissingWeather(f"weather series ends before simulation day {day}")
        return day, self.weather[day]

    def forcing_at(self, t_seconds):
        """Forcing for the step starting at ``t_seconds``.

        Irrigation is applied only at the sector currently under the arm and
        only while the pivot is active; rain falls uniformly; crop ET scales
        the daily reference value and splits between surface evaporation and
        root extraction downstream.
        """
        day, rec = self.day_record(t_seconds)
        cols = self.grid.n_columns
        irrigation = np.zeros(cols)
        _, active = pivot_position(t_seconds, self.schedule, self.grid.theta_span_rad)
        if active and self.schedule.irrigation_rate > 0:
            sector = pivot_sector(t_seconds, self.schedule, self.grid)
            irrigation[self.grid.sector_columns(sector)] = self.schedule.irrigation_rate
        irrigation += rec.precip_m_per_day / SECONDS_PER_DAY
        ev = np.full(cols, self.kc[day] * rec.et0_m_per_day / SECONDS_PER_DAY)
        return SurfaceForcing(
            irrigation=irrigation,
            evapotranspiration=ev,
            evaporation_fraction=self.evaporation_fraction,
        )
