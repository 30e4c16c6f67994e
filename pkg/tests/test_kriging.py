import numpy as np
import pytest

from pivotfield.errors import SingularSystem, TooFewSamples
from pivotfield.field_model import CylGrid, ParameterField
from pivotfield.hydraulics import PARAM_KINDS, SoilHydraulics
from pivotfield.kriging import (
    VariogramModel,
    default_variogram,
    fit_variogram,
    krige,
    kriging_weights,
    update_nonestimable,
)

from oracles import dense_kriging_weights


@pytest.fixture
def samples(rng):
    pts = rng.uniform(0, 100, size=(12, 2))
    vals = 0.3 + 0.05 * np.sin(pts[:, 0] / 30.0) + 0.02 * rng.standard_normal(12)
    return pts, vals


class TestVariogramModel:
    def test_zero_at_origin_and_sill_at_range(self):
        vg = VariogramModel("exponential", nugget=0.01, sill=0.2, range_m=50.0)
        assert vg(0.0) == 0.0
        assert vg(50.0) == pytest.approx(0.01 + 0.19 * (1 - np.exp(-3)), rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            VariogramModel("exponential", sill=0.0)
        with pytest.raises(ValueError):
            VariogramModel("power", sill=1.0)
        with pytest.raises(ValueError):
            VariogramModel("gaussian", nugget=0.5, sill=0.2)

    def test_spherical_plateau(self):
        vg = VariogramModel("spherical", sill=1.0, range_m=10.0)
        assert vg(10.0) == vg(25.0) == 1.0


class TestKrige:
    def test_exact_interpolation_at_samples(self, samples):
        pts, vals = samples
        vg = VariogramModel("exponential", nugget=0.0, sill=float(np.var(vals)) + 1e-6, range_m=40.0)
        pred, var = krige(pts, vals, vg, pts)
        np.testing.assert_allclose(pred, vals, atol=1e-8)
        assert np.all(var >= 0)

    def test_constant_field_reproduced_everywhere(self, rng):
        pts = rng.uniform(0, 50, size=(9, 2))
        vals = np.full(9, 0.37)
        vg = VariogramModel("exponential", sill=1.0, range_m=20.0)
        pred, _ = krige(pts, vals, vg, rng.uniform(0, 50, size=(20, 2)))
        np.testing.assert_allclose(pred, 0.37, rtol=1e-12)

    def test_weights_match_dense_oracle(self, rng):
        pts = rng.uniform(0, 10, size=(4, 2))
        query = np.array([4.0, 6.0])
        vg = VariogramModel("spherical", nugget=0.02, sill=0.6, range_m=8.0)
        weights, mu, _ = kriging_weights(pts, vg, query[None, :])
        ref_w, ref_mu = dense_kriging_weights(pts, query, vg)
        np.testing.assert_allclose(weights[0], ref_w, atol=1e-10)
        assert mu[0] == pytest.approx(ref_mu, abs=1e-10)

    def test_weights_sum_to_one(self, samples, rng):
        pts, _ = samples
        vg = VariogramModel("gaussian", nugget=0.001, sill=0.3, range_m=35.0)
        weights, _, _ = kriging_weights(pts, vg, rng.uniform(0, 100, size=(25, 2)))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-10)

    def test_duplicate_locations_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(SingularSystem):
            kriging_weights(pts, VariogramModel(), np.array([[0.5, 0.5]]))


class TestFitVariogram:
    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            fit_variogram(np.zeros((4, 2)), np.zeros(4))

    def test_constant_values_fall_back_flat(self, rng):
        pts = rng.uniform(0, 100, size=(15, 2))
        vg = fit_variogram(pts, np.full(15, 0.4), field_radius=90.0)
        assert vg.sill <= 1e-12
        assert vg.range_m == pytest.approx(30.0)

    def test_single_bin_falls_back(self, rng):
        pts = rng.uniform(0, 100, size=(10, 2))
        vals = rng.normal(size=10)
        vg = fit_variogram(pts, vals, n_bins=1, field_radius=60.0)
        assert vg.range_m == pytest.approx(20.0)
        assert vg.sill == pytest.approx(float(np.var(vals)), rel=1e-12)

    def test_recovers_range_of_synthetic_exponential_field(self, rng):
        true_range, sill = 40.0, 0.04
        estimates = []
        for _ in range(50):
            pts = rng.uniform(0, 300, size=(120, 2))
            d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            cov = sill * np.exp(-3.0 * d / true_range)
            vals = np.linalg.cholesky(cov + 1e-10 * np.eye(120)) @ rng.standard_normal(120)
            estimates.append(fit_variogram(pts, vals, n_bins=12).range_m)
        assert abs(np.median(estimates) - true_range) / true_range < 0.30


class TestUpdateNonestimable:
    def grid(self):
        return CylGrid(n_r=4, n_theta=6, n_z=2, radius_m=60.0, depth_m=0.3)

    def field(self, grid, scl):
        return ParameterField.uniform(grid, scl)

    def test_all_estimable_is_noop(self, scl):
        g = self.grid()
        f = self.field(g, scl)
        out = update_nonestimable(f, np.arange(g.n_columns), g)
        for kind in PARAM_KINDS:
            np.testing.assert_array_equal(out.params.kind(kind), f.params.kind(kind))

    def test_uniform_estimates_spread_uniformly(self, scl):
        g = self.grid()
        f = self.field(g, scl)
        estimated = np.arange(0, g.n_columns, 2)
        tweaked = f.copy()
        np.asarray(tweaked.params.alpha)[estimated] = 2.5
        out = update_nonestimable(tweaked, estimated, g)
        np.testing.assert_allclose(np.asarray(out.params.alpha), 2.5, rtol=1e-10)

    def test_skips_below_minimum_samples(self, scl):
        g = self.grid()
        f = self.field(g, scl)
        tweaked = f.copy()
        np.asarray(tweaked.params.alpha)[:3] = 3.3
        out = update_nonestimable(tweaked, np.arange(3), g)
        assert np.asarray(out.params.alpha)[5] == pytest.approx(1.90)

    def test_checkerboard_interpolation_stays_in_envelope(self, scl):
        g = self.grid()
        f = self.field(g, scl)
        cols = np.arange(g.n_columns)
        checker = (cols // g.n_theta + cols % g.n_theta) % 2 == 0
        estimated = cols[checker]
        lo, hi = 0.32, 0.46
        truth = np.where(checker, hi, lo)
        tweaked = f.copy()
        np.asarray(tweaked.params.theta_s)[estimated] = truth[estimated]
        out = update_nonestimable(tweaked, estimated, g)
        filled = np.asarray(out.params.theta_s)[~checker]
        assert np.all(filled >= lo - 1e-9) and np.all(filled <= hi + 1e-9)

    def test_ks_interpolates_in_log_space(self, scl):
        # two tight clusters at 1e-7 and 1e-5: a mid query must land near the
        # geometric mean, far below the arithmetic mean
        g = CylGrid(n_r=7, n_theta=1, n_z=2, radius_m=70.0, depth_m=0.3, theta_span_rad=0.4)
        f = ParameterField.uniform(g, scl)
        estimated = np.array([0, 1, 2, 4, 5, 6])
        ks = np.asarray(f.params.k_s)
        ks[[0, 1, 2]] = 1e-7
        ks[[4, 5, 6]] = 1e-5
        out = update_nonestimable(f, estimated, g)
        mid = np.asarray(out.params.k_s)[3]
        assert 3e-7 < mid < 3e-6  # near 1e-6 in log space, not ~5e-6

    def test_result_respects_soil_invariants(self, scl, rng):
        g = self.grid()
        f = self.field(g, scl)
        estimated = rng.choice(g.n_columns, size=10, replace=False)
        for kind in PARAM_KINDS:
            arr = np.asarray(f.params.kind(kind))
            arr[estimated] = arr[estimated] * rng.uniform(0.8, 1.25, size=10)
        out = update_nonestimable(f, estimated, g)
        SoilHydraulics(
            theta_s=np.asarray(out.params.theta_s),
            theta_r=np.asarray(out.params.theta_r),
            k_s=np.asarray(out.params.k_s),
            alpha=np.asarray(out.params.alpha),
            n=np.asarray(out.params.n),
            s_r=1e-4,
        )
