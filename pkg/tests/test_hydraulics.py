import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotfield.hydraulics import (
    PARAM_KINDS,
    SoilHydraulics,
    capacity,
    conductivity,
    hydraulic_derivatives,
    storage,
    water_content,
)

from conftest import SANDY_CLAY_LOAM
from oracles import central_difference, mp_capacity, mp_conductivity, mp_water_content, richardson_difference

# frozen extended-precision evaluations of the constitutive relations for the
# sandy clay loam parameter set (h in metres)
THETA_AT_M1 = 0.33092410988790607
K_AT_M05 = 1.6698594483816725e-8
C_AT_M1 = 0.05217893569437225
DTHETA_DALPHA_AT_M1 = -0.02746259773388013
THETA_AT_M1E6 = 0.09362023165434196


class TestWaterContent:
    def test_saturated_branch_returns_theta_s(self, scl):
        assert water_content(0.0, scl) == pytest.approx(0.410, abs=0)
        assert water_content(0.75, scl) == pytest.approx(0.410, abs=0)

    def test_dry_limit_tends_to_theta_r(self, scl):
        # the retention curve approaches theta_r very slowly for n near 1;
        # at -1e6 m it is still ~0.0936, the true limit needs far drier heads
        assert water_content(-1e6, scl) == pytest.approx(THETA_AT_M1E6, rel=1e-12)
        assert water_content(-1e12, scl) == pytest.approx(0.090, abs=1e-4)

    def test_golden_value(self, scl):
        assert water_content(-1.0, scl) == pytest.approx(THETA_AT_M1, rel=1e-12)

    def test_bounds_and_monotonicity(self, scl):
        h = np.linspace(-50.0, 0.5, 4001)
        theta = water_content(h, scl)
        assert np.all(theta >= scl.theta_r - 1e-15)
        assert np.all(theta <= scl.theta_s + 1e-15)
        assert np.all(np.diff(theta) >= 0)


class TestConductivity:
    def test_saturated_branch_returns_k_s(self, scl):
        assert conductivity(0.0, scl) == pytest.approx(7.222e-7, abs=0)

    def test_dry_limit(self, scl):
        assert conductivity(-1e6, scl) < 1e-20

    def test_golden_value(self, scl):
        assert conductivity(-0.5, scl) == pytest.approx(K_AT_M05, rel=1e-12)

    def test_monotone_nondecreasing(self, scl):
        h = np.linspace(-50.0, 0.5, 4001)
        assert np.all(np.diff(conductivity(h, scl)) >= 0)


class TestCapacity:
    def test_saturated_branch_is_specific_storage(self, scl):
        assert capacity(0.3, scl) == pytest.approx(1e-4, abs=0)

    def test_golden_value(self, scl):
        assert capacity(-1.0, scl) == pytest.approx(C_AT_M1, rel=1e-12)

    def test_strictly_positive(self, scl):
        h = np.linspace(-100.0, 1.0, 5000)
        assert np.all(capacity(h, scl) > 0)

    def test_matches_theta_slope(self, scl):
        for h in np.linspace(-8.0, -0.05, 40):
            fd = central_difference(lambda x: water_content(x, scl), h)
            assert capacity(h, scl) == pytest.approx(fd, rel=1e-5)


def test_continuity_below_saturation(scl):
    # true continuity: the largest jump over a grid must vanish on refinement
    # (K has unbounded slope near h=0 for n<2, so no fixed bound works there)
    for fn in (water_content, conductivity, capacity):
        jumps = []
        for n_pts in (2001, 32001):
            vals = fn(np.linspace(-20.0, -1e-12, n_pts), scl)
            jumps.append(np.max(np.abs(np.diff(vals))))
        assert jumps[1] < jumps[0] / 1.5

    # theta and K are continuous across the saturation point; C may jump there
    eps = 10.0 ** -np.arange(4, 10, dtype=float)
    assert np.all(np.abs(water_content(-eps, scl) - water_content(0.0, scl)) < 1e-3 * eps**0.2)
    assert np.abs(conductivity(-1e-9, scl) - conductivity(0.0, scl)) < 1e-8


def test_extended_precision_match_on_random_points(scl, rng):
    for _ in range(50):
        p = SoilHydraulics(
            theta_s=rng.uniform(0.3, 0.55),
            theta_r=rng.uniform(0.01, 0.15),
            k_s=10 ** rng.uniform(-8, -4),
            alpha=rng.uniform(0.5, 15.0),
            n=rng.uniform(1.05, 3.0),
            s_r=1e-4,
        )
        h = rng.uniform(-30.0, 0.5)
        assert water_content(h, p) == pytest.approx(float(mp_water_content(h, p)), rel=1e-10)
        assert conductivity(h, p) == pytest.approx(float(mp_conductivity(h, p)), rel=1e-10)
        assert capacity(h, p) == pytest.approx(float(mp_capacity(h, p)), rel=1e-10)


class TestDerivatives:
    def test_saturated_theta_slope_is_zero(self, scl):
        der = hydraulic_derivatives(np.array([0.0, 0.4]), scl)
        assert np.all(der.dtheta_dh == 0.0)

    def test_dk_dks_equals_k_over_ks(self, scl):
        for h in (-3.0, -0.2, 0.1):
            der = hydraulic_derivatives(np.array([h]), scl)
            assert der.dk["k_s"][0] == pytest.approx(conductivity(h, scl) / scl.k_s, rel=1e-12)

    def test_golden_dtheta_dalpha(self, scl):
        der = hydraulic_derivatives(np.array([-1.0]), scl)
        assert der.dtheta["alpha"][0] == pytest.approx(DTHETA_DALPHA_AT_M1, rel=1e-9)

    @pytest.mark.parametrize("h", [-9.0, -2.7, -1.0, -0.31, -0.04])
    def test_head_derivatives_match_finite_differences(self, scl, h):
        der = hydraulic_derivatives(np.array([h]), scl)
        fd_theta = central_difference(lambda x: water_content(x, scl), h)
        fd_k = central_difference(lambda x: conductivity(x, scl), h)
        assert der.dtheta_dh[0] == pytest.approx(fd_theta, rel=1e-5)
        assert der.dk_dh[0] == pytest.approx(fd_k, rel=1e-5)

    @pytest.mark.parametrize("kind", PARAM_KINDS)
    @pytest.mark.parametrize("h", [-5.0, -1.0, -0.1])
    def test_parameter_derivatives_match_finite_differences(self, scl, kind, h):
        der = hydraulic_derivatives(np.array([h]), scl)

        def with_kind(fn):
            def inner(v):
                return fn(h, scl.replace_kind(kind, v))

            return inner

        base = float(scl.kind(kind))
        for fn, got in ((water_content, der.dtheta), (conductivity, der.dk), (capacity, der.dc)):
            fd = richardson_difference(with_kind(fn), base)
            scale = max(abs(fd), abs(got[kind][0]), 1e-14)
            assert abs(got[kind][0] - fd) / scale < 1e-5


def test_storage_slope_is_capacity_on_both_branches(scl):
    for h in (-2.0, -0.5, 0.2, 0.8):
        fd = central_difference(lambda x: storage(x, scl), h)
        assert capacity(h, scl) == pytest.approx(fd, rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    theta_s=st.floats(0.3, 0.55),
    theta_r=st.floats(0.01, 0.15),
    alpha=st.floats(0.5, 15.0),
    n=st.floats(1.05, 3.0),
    h=st.floats(-1e4, 5.0),
)
def test_water_content_always_within_physical_bounds(theta_s, theta_r, alpha, n, h):
    p = SoilHydraulics(theta_s=theta_s, theta_r=theta_r, k_s=1e-6, alpha=alpha, n=n)
    theta = water_content(h, p)
    assert theta_r - 1e-12 <= theta <= theta_s + 1e-12


def test_parameter_validation():
    good = dict(SANDY_CLAY_LOAM)
    with pytest.raises(ValueError):
        SoilHydraulics(**{**good, "theta_r": 0.5})
    with pytest.raises(ValueError):
        SoilHydraulics(**{**good, "n": 1.0})
    with pytest.raises(ValueError):
        SoilHydraulics(**{**good, "k_s": 0.0})
    with pytest.raises(ValueError):
        SoilHydraulics(**{**good, "alpha": -1.0})
