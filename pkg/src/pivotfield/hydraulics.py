"""Mualem-van Genuchten constitutive relations and their analytic derivatives.

All functions accept a scalar pressure head or an ndarray of heads together
with a :class:`SoilHydraulics` whose fields may be scalars or arrays that
broadcast against ``h``.  Heads are in metres (negative when unsaturated),
conductivities in m/s, capacities in 1/m.

The saturated branch is entered at ``h >= 0``; water content and conductivity
are continuous there, while the capillary capacity jumps to the specific
storage coefficient so that it never vanishes under wet conditions.
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

#: Order of the per-node scalar parameters in the flattened parameter vector.
PARAM_KINDS = ("k_s", "theta_s", "theta_r", "alpha", "n")

#: Physical clamping windows applied to estimated/interpolated parameters.
#: K_s is handled in log space (positivity is automatic); the wide window
#: below only guards against runaway excursions.
PARAM_BOUNDS = {
    "k_s": (1e-10, 1e-3),
    "theta_s": (0.3, 0.55),
    "theta_r": (0.01, 0.15),
    "alpha": (0.5, 15.0),
    "n": (1.05, 3.0),
}


def clamp_kind(kind, values, bounds=None):
    """Clamp one parameter kind's values into its physical window."""
    lo, hi = (bounds or PARAM_BOUNDS)[kind]
    return np.clip(values, lo, hi)


@dataclass
class SoilHydraulics:
    """Van Genuchten/Mualem parameter set; fields are scalars or node arrays.

    Attributes
    ----------
    theta_s, theta_r : saturated / residual volumetric content (m3/m3)
    k_s : saturated hydraulic conductivity (m/s)
    alpha : inverse air-entry pressure (1/m)
    n : retention curve shape exponent (> 1)
    s_r : specific storage assigned to the saturated branch of C(h) (1/m)
    """

    theta_s: ArrayLike
    theta_r: ArrayLike
    k_s: ArrayLike
    alpha: ArrayLike
    n: ArrayLike
    s_r: ArrayLike = 1e-4

    def __post_init__(self):
        if not np.all((0 <= np.asarray(self.theta_r)) & (np.asarray(self.theta_r) < np.asarray(self.theta_s))):
            raise ValueError("require 0 <= theta_r < theta_s")
        if not np.all(np.asarray(self.theta_s) <= 1.0):
            raise ValueError("theta_s must not exceed 1")
        for name in ("k_s", "alpha", "s_r"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"{name} must be positive")
        if not np.all(np.asarray(self.n) > 1.0):
            raise ValueError("n must exceed 1")

    def kind(self, name):
        """Return one parameter field by kind name from :data:`PARAM_KINDS`."""
        return getattr(self, name)

    def replace_kind(self, name, value):
        """Copy of this parameter set with one kind replaced."""
        fields = {k: getattr(self, k) for k in PARAM_KINDS}
        fields[name] = value
        return SoilHydraulics(s_r=self.s_r, **fields)


def _branch_parts(h, p):
    """Stable log-space building blocks of the unsaturated branch.

    Returns ``(wet, lg, log_g, r_ug, inv_g)`` where ``wet`` marks the
    saturated branch (h >= 0), ``lg = n*log(-alpha*h)`` (so ``u = exp(lg)``),
    ``log_g = log(1 + u)``, ``r_ug = u/(1+u)`` and ``inv_g = 1/(1+u)``.
    Unsaturated quantities are evaluated on a clipped head so the saturated
    entries never produce invalid operations.
    """
    h = np.asarray(h, dtype=float)
    wet = h >= 0.0
    h_dry = np.where(wet, -1.0, h)
    lg = np.asarray(p.n) * np.log(-np.asarray(p.alpha) * h_dry)
    log_g = np.logaddexp(0.0, lg)
    r_ug = np.exp(lg - log_g)
    inv_g = np.exp(-log_g)
    return wet, h_dry, lg, log_g, r_ug, inv_g


def water_content(h, p):
    """Volumetric water content theta_v(h) (m3/m3)."""
    wet, _, _, log_g, _, _ = _branch_parts(h, p)
    m = 1.0 - 1.0 / np.asarray(p.n)
    se = np.exp(-m * log_g)
    theta = np.asarray(p.theta_r) + (np.asarray(p.theta_s) - np.asarray(p.theta_r)) * se
    out = np.where(wet, np.asarray(p.theta_s) * np.ones_like(theta), theta)
    return out if out.ndim else float(out)


def conductivity(h, p):
    """Unsaturated hydraulic conductivity K(h) (m/s)."""
    wet, _, lg, log_g, _, _ = _branch_parts(h, p)
    m = 1.0 - 1.0 / np.asarray(p.n)
    # B = 1 - (u/g)^m computed via expm1 for accuracy near saturation of psi
    b = -np.expm1(m * (lg - log_g))
    k = np.asarray(p.k_s) * np.exp(-0.5 * m * log_g) * b * b
    out = np.where(wet, np.asarray(p.k_s) * np.ones_like(k), k)
    return out if out.ndim else float(out)


def capacity(h, p):
    """Capillary capacity C(h) = d(theta)/dh for h < 0, s_r for h >= 0 (1/m)."""
    wet, _, lg, log_g, _, _ = _branch_parts(h, p)
    nn = np.asarray(p.n)
    m = 1.0 - 1.0 / nn
    delta = np.asarray(p.theta_s) - np.asarray(p.theta_r)
    c = delta * np.asarray(p.alpha) * nn * m * np.exp(lg * (nn - 1.0) / nn - (m + 1.0) * log_g)
    out = np.where(wet, np.asarray(p.s_r) * np.ones_like(c), c)
    return out if out.ndim else float(out)


def storage(h, p):
    """Antiderivative of C(h): theta(h) below saturation, theta_s + s_r*h above.

    This is the quantity conserved by the implicit stepper; its derivative in
    h equals :func:`capacity` on both branches.
    """
    h = np.asarray(h, dtype=float)
    theta = water_content(h, p)
    out = np.where(h >= 0.0, np.asarray(p.theta_s) + np.asarray(p.s_r) * h, theta)
    return out if out.ndim else float(out)


@dataclass
class HydraulicDerivatives:
    """Pointwise partials of theta, K and C.

    ``dtheta``, ``dk`` and ``dc`` map each kind in :data:`PARAM_KINDS` to the
    corresponding parameter partial; ``dtheta_dh`` / ``dk_dh`` are the head
    partials.  The ``dtheta`` entries double as partials of :func:`storage`
    (the two agree on both branches for the five estimable kinds).
    """

    dtheta_dh: np.ndarray
    dk_dh: np.ndarray
    dtheta: dict = field(default_factory=dict)
    dk: dict = field(default_factory=dict)
    dc: dict = field(default_factory=dict)


def hydraulic_derivatives(h, p):
    """Analytic partials of theta(h), K(h), C(h) in h and the five parameters."""
    wet, h_dry, lg, log_g, r_ug, inv_g = _branch_parts(h, p)
    nn = np.asarray(p.n, dtype=float)
    al = np.asarray(p.alpha, dtype=float)
    ts = np.asarray(p.theta_s, dtype=float)
    trr = np.asarray(p.theta_r, dtype=float)
    ks = np.asarray(p.k_s, dtype=float)
    m = 1.0 - 1.0 / nn
    delta = ts - trr
    big_l = lg / nn  # log(-alpha*h)

    se = np.exp(-m * log_g)
    psi = np.exp(m * (lg - log_g))
    # b underflows only for heads far beyond physical range; keep it positive
    b = np.maximum(-np.expm1(m * (lg - log_g)), 1e-300)
    k_unsat = ks * np.exp(-0.5 * m * log_g) * b * b
    c_unsat = delta * al * nn * m * np.exp(lg * (nn - 1.0) / nn - (m + 1.0) * log_g)

    zeros = np.zeros(np.broadcast(np.asarray(h, dtype=float), nn, al).shape)

    def pick(dry_val, wet_val=0.0):
        out = np.where(wet, wet_val + zeros, dry_val + zeros)
        return out

    # theta partials --------------------------------------------------------
    dtheta_dh = pick(c_unsat)  # saturated branch: theta constant
    dse_dn = se * (-log_g / nn**2 - m * r_ug * big_l)
    dtheta = {
        "k_s": pick(0.0),
        "theta_s": pick(se, 1.0),
        "theta_r": pick(1.0 - se, 0.0),
        "alpha": pick(-delta * m * nn / al * se * r_ug),
        "n": pick(delta * dse_dn),
    }

    # K partials ------------------------------------------------------------
    grad_struct = 0.5 * r_ug + 2.0 * psi * inv_g / b
    dk_dh = pick(-k_unsat * m * nn / h_dry * grad_struct)
    dpsi_dn = psi * ((lg - log_g) / nn**2 + m * big_l * inv_g)
    dk = {
        "k_s": pick(k_unsat / ks, 1.0),
        "theta_s": pick(0.0),
        "theta_r": pick(0.0),
        "alpha": pick(-k_unsat * m * nn / al * grad_struct),
        "n": pick(k_unsat * (0.5 * dse_dn / se - 2.0 * dpsi_dn / b)),
    }

    # C partials ------------------------------------------------------------
    dc = {
        "k_s": pick(0.0),
        "theta_s": pick(c_unsat / delta),
        "theta_r": pick(-c_unsat / delta),
        "alpha": pick(c_unsat / al * (nn - (m + 1.0) * nn * r_ug)),
        "n": pick(
            c_unsat
            * (1.0 / nn + 1.0 / (nn**2 * m) + big_l - log_g / nn**2 - (m + 1.0) * r_ug * big_l)
        ),
    }

    return HydraulicDerivatives(dtheta_dh=dtheta_dh, dk_dh=dk_dh, dtheta=dtheta, dk=dk, dc=dc)
