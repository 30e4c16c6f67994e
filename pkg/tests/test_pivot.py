import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from pivotfield.errors import DataError
from pivotfield.field_model import CylGrid, FieldState, ParameterField
from pivotfield.pivot import (
    GeoReference,
    PivotSchedule,
    RawObservation,
    haversine_m,
    measured_nodes,
    measured_sector,
    pivot_position,
    pivot_sector,
    preprocess,
    synthesize_measurements,
)


def grid_3040():
    return CylGrid(n_r=30, n_theta=40, n_z=3, radius_m=290.0, depth_m=0.3)


def small_grid():
    return CylGrid(n_r=4, n_theta=8, n_z=3, radius_m=40.0, depth_m=0.3)


class TestKinematics:
    def test_start(self):
        sched = PivotSchedule(angular_speed=1e-4, start_angle=0.7)
        angle, active = pivot_position(0.0, sched)
        assert angle == pytest.approx(0.7)
        assert active

    def test_full_rotation_wraps_to_start(self):
        sched = PivotSchedule(angular_speed=1e-3, active_hours=24.0, start_angle=0.2)
        period = 2.0 * math.pi / 1e-3
        angle, _ = pivot_position(period, sched)
        assert angle == pytest.approx(0.2, abs=1e-9)

    def test_daily_window_accumulation(self):
        sched = PivotSchedule(angular_speed=2e-4, active_hours=8.0)
        angle_12h, active_12h = pivot_position(12 * 3600.0, sched)
        assert not active_12h
        assert angle_12h == pytest.approx((2e-4 * 8 * 3600.0) % (2 * math.pi))
        # parked until the next day's window opens
        angle_20h, _ = pivot_position(20 * 3600.0, sched)
        assert angle_20h == angle_12h

    def test_tip_speed_constructor(self):
        sched = PivotSchedule.from_tip_speed(0.011, 290.0)
        assert sched.angular_speed == pytest.approx(0.011 / 290.0)


class TestMeasuredNodes:
    def test_one_sector_ahead(self):
        g = grid_3040()
        sched = PivotSchedule(angular_speed=1e-6, start_angle=0.0)
        cols = measured_nodes(0.0, sched, g, offset=1)
        assert np.array_equal(cols, np.arange(30) * 40 + 1)

    def test_periodic_wraparound(self):
        g = grid_3040()
        last_sector_angle = (g.n_theta - 0.5) * g.dtheta
        sched = PivotSchedule(angular_speed=1e-9, start_angle=last_sector_angle)
        assert measured_sector(0.0, sched, g, offset=1) == 0

    def test_bounded_grid_runs_out(self):
        g = CylGrid(n_r=4, n_theta=6, n_z=2, radius_m=40.0, depth_m=0.3, theta_span_rad=np.pi / 2)
        sched = PivotSchedule(angular_speed=1e-9, start_angle=(g.n_theta - 0.5) * g.dtheta)
        assert measured_nodes(0.0, sched, g, offset=1) is None

    def test_offset_must_look_ahead(self):
        g = small_grid()
        sched = PivotSchedule(angular_speed=1e-6)
        with pytest.raises(ValueError):
            measured_nodes(0.0, sched, g, offset=0)

    def test_sweep_visits_every_sector_once_per_rotation(self):
        g = small_grid()
        dt = 360.0
        # one sector per step, running around the clock
        sched = PivotSchedule(angular_speed=g.dtheta / dt, active_hours=24.0)
        sectors = [measured_sector(k * dt, sched, g, offset=1) for k in range(g.n_theta)]
        assert sorted(sectors) == list(range(g.n_theta))
        again = [measured_sector((g.n_theta + k) * dt, sched, g, offset=1) for k in range(g.n_theta)]
        assert again == sectors

    def test_never_measures_irrigated_sector(self):
        g = small_grid()
        sched = PivotSchedule(angular_speed=g.dtheta / 360.0, active_hours=24.0)
        for k in range(3 * g.n_theta):
            t = k * 117.0
            assert measured_sector(t, sched, g) != pivot_sector(t, sched, g)


class TestSynthesize:
    def test_zero_noise_is_exact_observation(self, scl):
        g = small_grid()
        params = ParameterField.uniform(g, scl)
        state = FieldState(np.linspace(-1.5, -1.0, g.n_nodes))
        from pivotfield.field_model import observe

        batch = synthesize_measurements(state, params, g, g.sector_columns(2), 2, noise_std=0.0, rng=1)
        assert np.array_equal(batch.values, observe(state, params, g, g.sector_columns(2), 2))

    def test_fixed_seed_reproducible(self, scl):
        g = small_grid()
        params = ParameterField.uniform(g, scl)
        state = FieldState(np.full(g.n_nodes, -1.2))
        one = synthesize_measurements(state, params, g, g.sector_columns(0), 1, 0.01, rng=42)
        two = synthesize_measurements(state, params, g, g.sector_columns(0), 1, 0.01, rng=42)
        assert np.array_equal(one.values, two.values)

    def test_monte_carlo_noise_level(self, scl):
        g = small_grid()
        params = ParameterField.uniform(g, scl)
        state = FieldState(np.full(g.n_nodes, -1.2))
        rng = np.random.default_rng(3)
        cols = g.sector_columns(1)[:1]
        samples = np.array(
            [synthesize_measurements(state, params, g, cols, 1, 0.01, rng=rng).values[0] for _ in range(10_000)]
        )
        assert np.std(samples) == pytest.approx(0.01, rel=0.05)


def _obs(ts, r, theta, vwc):
    return RawObservation(timestamp=ts, vwc=vwc, r=r, theta=theta)


class TestPreprocess:
    t0 = datetime(2021, 6, 3, tzinfo=timezone.utc)

    def test_single_observation_at_node(self, scl):
        g = small_grid()
        r, theta = g.r_coords[2], (3 + 0.5) * g.dtheta
        batches, report = preprocess([_obs(self.t0, r, theta, 0.25)], g, scl, t_s=600.0)
        assert report.n_batches == 1
        assert batches[0].node_columns.tolist() == [g.column_index(2, 3)]
        assert batches[0].values[0] == pytest.approx(0.25)

    def test_outlier_dropped(self, scl):
        g = small_grid()
        r, theta = g.r_coords[0], 0.5 * g.dtheta
        obs = [_obs(self.t0, r, theta, 0.95), _obs(self.t0, r, theta, 0.25)]
        batches, report = preprocess(obs, g, scl, t_s=600.0)
        assert report.n_outliers_dropped == 1
        assert batches[0].values[0] == pytest.approx(0.25)

    def test_below_residual_dropped(self, scl):
        g = small_grid()
        obs = [_obs(self.t0, g.r_coords[0], 0.5 * g.dtheta, 0.01)]
        with pytest.raises(IndexError):
            preprocess(obs, g, scl, t_s=600.0)[0][0]

    def test_duplicates_averaged(self, scl):
        g = small_grid()
        r, theta = g.r_coords[1], 1.5 * g.dtheta
        obs = [
            _obs(self.t0 + timedelta(seconds=10), r, theta, 0.20),
            _obs(self.t0 + timedelta(seconds=20), r + 0.01, theta, 0.30),
        ]
        batches, _ = preprocess(obs, g, scl, t_s=600.0)
        assert batches[0].values[0] == pytest.approx(0.25)

    def test_buckets_are_time_ordered_and_sorted_first(self, scl):
        g = small_grid()
        r, theta = g.r_coords[1], 1.5 * g.dtheta
        obs = [
            _obs(self.t0 + timedelta(minutes=25), r, theta, 0.22),
            _obs(self.t0, r, theta, 0.20),
            _obs(self.t0 + timedelta(minutes=11), r, theta, 0.21),
        ]
        batches, _ = preprocess(obs, g, scl, t_s=600.0)
        assert [b.time_index for b in batches] == [0, 1, 2]
        assert [b.values[0] for b in batches] == pytest.approx([0.20, 0.21, 0.22])

    def test_values_within_soil_bounds(self, scl, rng):
        g = small_grid()
        obs = [
            _obs(self.t0 + timedelta(seconds=int(i * 30)), rng.uniform(0, g.radius_m), rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 0.6))
            for i in range(300)
        ]
        batches, _ = preprocess(obs, g, scl, t_s=600.0)
        for b in batches:
            assert np.all(b.values >= scl.theta_r) and np.all(b.values <= scl.theta_s)
            assert np.all(b.node_columns < g.n_columns)

    def test_empty_input_rejected(self, scl):
        with pytest.raises(DataError):
            preprocess([], small_grid(), scl, t_s=600.0)

    def test_geographic_mapping(self, scl):
        g = small_grid()
        geo = GeoReference(center_lat=49.7230, center_lon=-112.8001)
        lat, lon = geo.node_latlon(g.r_coords[3], 2.5 * g.dtheta)
        obs = [RawObservation(self.t0, 0.3, lat=lat, lon=lon)]
        batches, report = preprocess(obs, g, scl, t_s=600.0, geo=geo)
        assert report.n_mapped == 1
        assert batches[0].node_columns.tolist() == [g.column_index(3, 2)]

    def test_haversine_scale(self):
        # one degree of latitude is about 111 km
        d = haversine_m(49.0, -112.0, 50.0, -112.0)
        assert d == pytest.approx(111_195, rel=1e-3)
