"""Ordinary kriging of estimated hydraulic parameters across the field surface.

Estimated (measured-node) parameter values are spread to the remaining
surface nodes by ordinary kriging: best linear unbiased interpolation under
an unknown constant mean, with weights from a semivariogram model.  The five
parameter kinds are interpolated independently; saturated conductivity is
interpolated in log space.  Because ordinary-kriging weights do not depend on
the variogram sill, one weight system solved at the estimated locations
serves all five kinds.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import SingularSystem, TooFewSamples
from .field_model import ParameterField
from .hydraulics import PARAM_KINDS, SoilHydraulics, clamp_kind

log = logging.getLogger(__name__)

VARIOGRAM_KINDS = ("exponential", "spherical", "gaussian")


@dataclass
class VariogramModel:
    """Isotropic semivariogram with an effective range (GSLIB convention)."""

    kind: str = "exponential"
    nugget: float = 0.0
    sill: float = 1.0
    range_m: float = 100.0

    def __post_init__(self):
        if self.kind not in VARIOGRAM_KINDS:
            raise ValueError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0 or self.sill <= 0 or self.range_m <= 0:
            raise ValueError("need nugget >= 0, sill > 0, range > 0")
        if self.sill < self.nugget:
            raise ValueError("sill must not be below the nugget")

    def __call__(self, d):
        """Semivariance at distance d; gamma(0) = 0 by convention."""
        d = np.asarray(d, dtype=float)
        partial = self.sill - self.nugget
        ratio = d / self.range_m
        if self.kind == "exponential":
            struct = 1.0 - np.exp(-3.0 * ratio)
        elif self.kind == "gaussian":
            struct = 1.0 - np.exp(-3.0 * ratio**2)
        else:  # spherical
            struct = np.where(ratio < 1.0, 1.5 * ratio - 0.5 * ratio**3, 1.0)
        gamma = self.nugget + partial * struct
        return np.where(d > 0.0, gamma, 0.0)


def empirical_semivariogram(locations, values, n_bins, max_lag=None):
    """Distance-binned halves of squared value differences.

    Pairs beyond ``max_lag`` are discarded before binning (long lags of a
    single realization are dominated by fluctuations of the unknown mean).
    Returns (bin distances, semivariances, pair counts) for non-empty bins.
    """
    pts = np.asarray(locations, dtype=float)
    vals = np.asarray(values, dtype=float)
    iu = np.triu_indices(len(pts), k=1)
    d = np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=1)
    g = 0.5 * (vals[iu[0]] - vals[iu[1]]) ** 2
    if max_lag is not None:
        keep = d <= max_lag
        d, g = d[keep], g[keep]
    edges = np.linspace(0.0, d.max() * (1 + 1e-9), n_bins + 1)
    which = np.digitize(d, edges) - 1
    dist, semi, count = [], [], []
    for b in range(n_bins):
        sel = which == b
        if np.any(sel):
            dist.append(d[sel].mean())
            semi.append(g[sel].mean())
            count.append(int(sel.sum()))
    return np.array(dist), np.array(semi), np.array(count)


def default_variogram(field_radius, sample_variance=1.0):
    """Fallback model: exponential, no nugget, range a third of the radius."""
    return VariogramModel(
        kind="exponential",
        nugget=0.0,
        sill=max(float(sample_variance), 1e-12),
        range_m=max(field_radius / 3.0, 1e-6),
    )


def fit_variogram(sample_locations, sample_values, n_bins=8, kind="exponential", field_radius=None, max_lag_fraction=0.5):
    """Weighted least-squares fit of a variogram to the empirical cloud.

    Falls back to :func:`default_variogram` whenever the data cannot support
    a fit (constant values, too few usable bins, optimizer failure).
    """
    pts = np.asarray(sample_locations, dtype=float)
    vals = np.asarray(sample_values, dtype=float)
    if len(pts) < 5:
        raise TooFewSamples(f"variogram fitting needs >= 5 samples, got {len(pts)}")
    if field_radius is None:
        field_radius = float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max()) * 2.0
    variance = float(np.var(vals))
    if variance < 1e-30 or n_bins < 2:
        return default_variogram(field_radius, variance)
    iu = np.triu_indices(len(pts), k=1)
    max_lag = max_lag_fraction * float(np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=1).max())
    dist, semi, count = empirical_semivariogram(pts, vals, n_bins, max_lag=max_lag)
    if dist.size < 3 or semi.max() <= 0:
        return default_variogram(field_radius, variance)

    # relative weighting keeps the informative short lags from being drowned
    # out by the pair-rich long lags
    weights = np.sqrt(count) / np.maximum(semi, 1e-15)

    def residuals(x):
        nugget, partial, rng = x
        model = VariogramModel(kind=kind, nugget=nugget, sill=nugget + partial, range_m=rng)
        return weights * (model(dist) - semi)

    x0 = np.array([0.0, max(semi.max(), 1e-12), max(dist.max() / 2.0, 1e-6)])
    try:
        res = least_squares(
            residuals,
            x0,
            bounds=(np.array([0.0, 1e-12, 1e-6]), np.array([semi.max(), 5 * semi.max(), 4 * dist.max()])),
            max_nfev=300,
        )
        nugget, partial, rng = res.x
        return VariogramModel(kind=kind, nugget=float(nugget), sill=float(nugget + partial), range_m=float(rng))
    except Exception:  # degenerate clouds: fall back rather than fail
        log.warning("variogram fit failed; using defaults")
        return default_variogram(field_radius, variance)


def kriging_weights(sample_locations, variogram, query_locations):
    """Ordinary-kriging weights and Lagrange multipliers for many queries.

    Returns ``(weights, mu, gamma_q)`` where ``weights`` is (n_query, n),
    solved from one factorization of the augmented system with the
    unbiasedness constraint (each row sums to one).
    """
    pts = np.asarray(sample_locations, dtype=float)
    n = len(pts)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    if np.any(d[~np.eye(n, dtype=bool)] == 0):
        raise SingularSystem("duplicate sample locations")
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = variogram(d)  # gamma(0) = 0 puts zeros on the diagonal
    a[n, :n] = 1.0
    a[:n, n] = 1.0
    queries = np.atleast_2d(np.asarray(query_locations, dtype=float))
    dq = np.linalg.norm(queries[:, None, :] - pts[None, :, :], axis=-1)
    b = np.ones((n + 1, len(queries)))
    b[:n, :] = variogram(dq).T
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as err:
        raise SingularSystem(f"kriging system is singular: {err}") from None
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("kriging system produced non-finite weights")
    return sol[:n, :].T, sol[n, :], b[:n, :].T


def krige(sample_locations, sample_values, variogram, query_locations):
    """Ordinary-kriging prediction and variance at the query locations."""
    weights, mu, gamma_q = kriging_weights(sample_locations, variogram, query_locations)
    vals = np.asarray(sample_values, dtype=float)
    prediction = weights @ vals
    variance = np.sum(weights * gamma_q, axis=1) + mu
    bad = variance < -1e-10
    if np.any(bad):
        log.warning("negative kriging variance floored on %d queries", int(bad.sum()))
    return prediction, np.maximum(variance, 0.0)


def inverse_distance(sample_locations, sample_values, query_locations, power=2.0):
    """Inverse-distance fallback used when the kriging system is singular."""
    pts = np.asarray(sample_locations, dtype=float)
    vals = np.asarray(sample_values, dtype=float)
    queries = np.atleast_2d(np.asarray(query_locations, dtype=float))
    d = np.linalg.norm(queries[:, None, :] - pts[None, :, :], axis=-1)
    exact = d < 1e-12
    with np.errstate(divide="ignore"):
        w = 1.0 / d**power
    w[exact.any(axis=1)] = exact[exact.any(axis=1)].astype(float)
    w /= w.sum(axis=1, keepdims=True)
    return w @ vals


def update_nonestimable(field, estimated_columns, grid, target_columns=None, variogram=None, min_samples=5, bounds=None):
    """Spread estimated parameters to the non-estimated surface columns.

    ``field`` must already hold the estimated values at ``estimated_columns``;
    the target columns (every other column unless given explicitly) are
    replaced by kriged values (K_s in log space) and clamped to the physical
    windows.  With fewer than ``min_samples`` distinct estimated columns, or
    nothing left to fill, the field passes through unchanged.
    """
    estimated = np.unique(np.asarray(estimated_columns, dtype=int))
    out = field.copy()
    if target_columns is None:
        targets = np.setdiff1d(np.arange(grid.n_columns), estimated)
    else:
        targets = np.setdiff1d(np.asarray(target_columns, dtype=int), estimated)
    if estimated.size < min_samples or targets.size == 0:
        return out
    xy = grid.column_xy()
    vg = variogram or default_variogram(grid.radius_m)
    try:
        weights, _, _ = kriging_weights(xy[estimated], vg, xy[targets])
        interpolate = lambda v: weights @ v
    except SingularSystem:
        log.warning("kriging system singular; falling back to inverse-distance weighting")
        interpolate = lambda v: inverse_distance(xy[estimated], v, xy[targets])
    for kind in PARAM_KINDS:
        arr = np.asarray(out.params.kind(kind), dtype=float)
        samples = arr[estimated]
        if kind == "k_s":
            filled = np.exp(interpolate(np.log(samples)))
        else:
            filled = interpolate(samples)
        arr[targets] = clamp_kind(kind, filled, bounds)
        # keep the retention bounds mutually consistent after clamping
    theta_r = np.asarray(out.params.theta_r)
    theta_s = np.asarray(out.params.theta_s)
    squeeze = theta_r >= theta_s
    if np.any(squeeze):
        theta_r[squeeze] = theta_s[squeeze] - 1e-3
    return out
