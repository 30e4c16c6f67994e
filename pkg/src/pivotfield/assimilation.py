"""Augmented-state extended Kalman filter with estimable-parameter masking.

The augmented vector stacks every pressure head with the estimable parameter
set; one covariance matrix sized for the full estimable union is kept for the
whole run.  Parameters evolve as a random walk.  When a parameter is not
being estimated at a step (its sector is not the one being measured), its
rows/columns of the transition and observation Jacobians are masked so it
neither moves nor inflates, which keeps a single covariance matrix valid
across the rotating measurement geometry.

Saturated conductivities live in the augmented vector as natural logarithms,
so positivity never needs an explicit constraint; all other parameter kinds
are clamped to their physical windows after every update.

The filter algebra (:func:`ekf_predict`, :func:`ekf_update`) is independent
of the field model: on a linear system with no augmented parameters it
reduces exactly to the textbook Kalman recursion.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .errors import NonConvergence
from .field_model import (
    DEFAULT_OPTIONS,
    FieldState,
    ParameterField,
    observe,
    observe_jacobian,
    step_implicit,
)
from .hydraulics import PARAM_BOUNDS, PARAM_KINDS
from .kriging import update_nonestimable

log = logging.getLogger(__name__)

N_KINDS = len(PARAM_KINDS)


@dataclass
class NoiseSpec:
    """Process/measurement covariance configuration (diagonal)."""

    q_state: float
    r_unit: float
    p0_state: float
    p0_param: object = 0.0  # scalar, or dict kind -> variance (internal space)
    q_param: object = 0.0  # random-walk variance of *active* parameters

    def __post_init__(self):
        if self.q_state < 0 or np.any(np.asarray(self._kind_values(self.q_param)) < 0):
            raise ValueError("process variances must be non-negative")
        if self.r_unit <= 0:
            raise ValueError("measurement variance must be positive")
        if self.p0_state < 0:
            raise ValueError("initial variances must be non-negative")

    @staticmethod
    def _kind_values(value):
        return list(value.values()) if isinstance(value, dict) else [value]

    def p0_param_for(self, kind):
        if isinstance(self.p0_param, dict):
            return float(self.p0_param[kind])
        return float(self.p0_param)

    def q_param_for(self, kind):
        if isinstance(self.q_param, dict):
            return float(self.q_param[kind])
        return float(self.q_param)


@dataclass(eq=False)
class AugmentedBelief:
    """Mean and covariance of [heads; estimable parameters (internal)]."""

    x_a: np.ndarray
    P: np.ndarray
    n_state: int
    active_mask: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.x_a = np.asarray(self.x_a, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.P.shape != (self.x_a.size, self.x_a.size):
            raise ValueError("covariance shape mismatch")
        if self.active_mask.size != self.x_a.size - self.n_state:
            raise ValueError("active mask must cover the parameter block")

    @property
    def n_params(self):
        return self.x_a.size - self.n_state

    @property
    def head(self):
        return self.x_a[: self.n_state]

    @property
    def params_internal(self):
        return self.x_a[self.n_state :]

    def enforce_symmetry(self):
        """Symmetrize and floor the diagonal at zero, logging real violations."""
        self.P = 0.5 * (self.P + self.P.T)
        diag = np.diagonal(self.P)
        bad = diag < -1e-10
        if np.any(bad):
            log.warning("covariance diagonal went negative on %d entries", int(bad.sum()))
        if np.any(diag < 0):
            self.P[np.diag_indices_from(self.P)] = np.maximum(diag, 0.0)

    def copy(self):
        return AugmentedBelief(self.x_a.copy(), self.P.copy(), self.n_state, self.active_mask.copy(), self.time_index)


@dataclass
class ParamCoding:
    """Maps estimable global parameter indices to columns/kinds and handles
    the internal log transform of saturated conductivity."""

    indices: np.ndarray  # global flat indices, ascending

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        self.columns = self.indices // N_KINDS
        self.kind_ids = self.indices % N_KINDS
        self.kinds = [PARAM_KINDS[k] for k in self.kind_ids]
        self.is_log = np.array([k == "k_s" for k in self.kinds], dtype=bool)

    @property
    def n(self):
        return self.indices.size

    def to_internal(self, natural):
        out = np.asarray(natural, dtype=float).copy()
        out[self.is_log] = np.log(out[self.is_log])
        return out

    def to_natural(self, internal):
        out = np.asarray(internal, dtype=float).copy()
        out[self.is_log] = np.exp(out[self.is_log])
        return out

    def chain_factors(self, internal):
        """d(natural)/d(internal) per entry (the log entries scale by K_s)."""
        out = np.ones(self.n)
        out[self.is_log] = np.exp(np.asarray(internal, dtype=float)[self.is_log])
        return out

    def clamp_internal(self, internal, bounds=None):
        bounds = bounds or PARAM_BOUNDS
        natural = self.to_natural(internal)
        for kind in set(self.kinds):
            sel = np.array([k == kind for k in self.kinds])
            lo, hi = bounds[kind]
            natural[sel] = np.clip(natural[sel], lo, hi)
        return self.to_internal(natural)

    def scatter_into_field(self, field_, internal):
        """Write current estimates into a ParameterField (natural units)."""
        natural = self.to_natural(internal)
        for kind_id in np.unique(self.kind_ids):
            sel = self.kind_ids == kind_id
            np.asarray(field_.params.kind(PARAM_KINDS[kind_id]))[self.columns[sel]] = natural[sel]
        return field_


# ---------------------------------------------------------------------------
# filter algebra (model-agnostic)
# ---------------------------------------------------------------------------


def ekf_predict(belief, step_fn, q_state, q_param):
    # q_param may be a scalar or a per-entry vector aligned with the
    # parameter block; only active entries receive it
    """Masked prediction step.

    ``step_fn(x_state, params_internal, active_idx)`` must return the next
    state with the Jacobian blocks ``(x1, f_x, f_p_active)`` where
    ``f_p_active`` holds d(state)/d(parameter) columns for the active entries
    only.  Parameters follow a random walk; inactive entries neither move nor
    inflate (identity transition row, zeroed coupling column, no process
    noise), so their mean and variance pass through untouched.
    """
    n_s = belief.n_state
    active_idx = np.nonzero(belief.active_mask)[0]
    x1, f_x, f_pa = step_fn(belief.head, belief.params_internal, active_idx)

    p = belief.P
    act = n_s + active_idx
    # T = A @ P with A = [[f_x, F_p], [0, I]] and F_p nonzero on active cols
    top = f_x @ p[:n_s, :]
    if act.size:
        top += f_pa @ p[act, :]
    t = np.vstack([top, p[n_s:, :]])
    # P' = T @ A^T, exploiting the same structure columnwise
    left = t[:, :n_s] @ f_x.T
    if act.size:
        left += t[:, act] @ f_pa.T
    p_new = np.empty_like(p)
    p_new[:, :n_s] = left
    p_new[:, n_s:] = t[:, n_s:]
    p_new[np.arange(n_s), np.arange(n_s)] += q_state
    if act.size:
        q_vec = np.broadcast_to(np.asarray(q_param, dtype=float), belief.active_mask.shape)
        p_new[act, act] += q_vec[active_idx]

    x_a = np.concatenate([x1, belief.params_internal])
    out = AugmentedBelief(x_a, p_new, n_s, belief.active_mask.copy(), belief.time_index + 1)
    out.enforce_symmetry()
    return out


@dataclass
class UpdateInfo:
    innovation: np.ndarray
    normalized_sq: float
    gated: bool = False


def ekf_update(belief, y, obs_fn, r_unit, gate_confidence=None, clamp_fn=None):
    """Masked measurement update.

    ``obs_fn(x_state, params_internal, active_idx)`` returns ``(y_hat, c_x,
    c_p_active)``; observation Jacobian columns of inactive parameters are
    treated as zero.  With ``gate_confidence`` set, an update whose normalized
    innovation squared exceeds the chi-square quantile is skipped and logged.
    """
    n_s = belief.n_state
    y = np.asarray(y, dtype=float)
    active_idx = np.nonzero(belief.active_mask)[0]
    y_hat, c_x, c_pa = obs_fn(belief.head, belief.params_internal, active_idx)
    n_y = y.size

    c = np.zeros((n_y, belief.x_a.size))
    c[:, :n_s] = c_x
    if active_idx.size:
        c[:, n_s + active_idx] = c_pa

    pct = belief.P @ c.T
    s = c @ pct + r_unit * np.eye(n_y)
    innovation = y - y_hat
    sol = np.linalg.solve(s, innovation)
    normalized = float(innovation @ sol)

    if gate_confidence is not None and normalized > chi2.ppf(gate_confidence, df=n_y):
        log.warning("innovation gate tripped (d2=%.2f, N_y=%d); measurement skipped", normalized, n_y)
        out = belief.copy()
        return out, UpdateInfo(innovation, normalized, gated=True)

    gain = np.linalg.solve(s.T, pct.T).T  # P C^T S^-1 without forming S^-1
    x_a = belief.x_a + gain @ innovation
    p_new = belief.P - gain @ (c @ belief.P)
    out = AugmentedBelief(x_a, p_new, n_s, belief.active_mask.copy(), belief.time_index)
    out.enforce_symmetry()
    if clamp_fn is not None:
        out.x_a[n_s:] = clamp_fn(out.x_a[n_s:])
    return out, UpdateInfo(innovation, normalized)


def joseph_update_covariance(p, c, gain, r_unit):
    """Joseph-form covariance, used as a numerical health cross-check."""
    n = p.shape[0]
    i_gc = np.eye(n) - gain @ c
    return i_gc @ p @ i_gc.T + r_unit * (gain @ gain.T)


# ---------------------------------------------------------------------------
# Richards-model filter
# ---------------------------------------------------------------------------


class RichardsEKF:
    """Joint head/parameter estimation for the cylindrical field model.

    ``estimable_indices`` are global flat parameter indices (5 per column,
    kind-major) forming the augmented block; ``base_field`` supplies the
    non-estimable values and the initial guesses of the estimable ones.
    """

    def __init__(
        self,
        grid,
        base_field,
        estimable_indices,
        noise,
        initial_state,
        opts=DEFAULT_OPTIONS,
        bounds=None,
        gate_confidence=None,
        kriging_enabled=True,
        kriging_min_samples=5,
        nonestimable_columns=None,
        max_dt_halvings=4,
    ):
        self.grid = grid
        self.field = base_field.copy()
        self.coding = ParamCoding(np.sort(np.asarray(estimable_indices, dtype=int)))
        self.noise = noise
        self.opts = opts
        self.bounds = bounds or PARAM_BOUNDS
        self.gate_confidence = gate_confidence
        self.kriging_enabled = kriging_enabled
        self.kriging_min_samples = kriging_min_samples
        self.max_dt_halvings = max_dt_halvings
        self.updated_columns = set()
        if nonestimable_columns is None:
            estimable_cols = np.unique(self.coding.columns)
            self.nonestimable_columns = np.setdiff1d(np.arange(grid.n_columns), estimable_cols)
        else:
            self.nonestimable_columns = np.asarray(nonestimable_columns, dtype=int)

        natural0 = self.field.to_vector()[self.coding.indices]
        x_a = np.concatenate([np.asarray(initial_state.head, dtype=float), self.coding.to_internal(natural0)])
        p0 = np.zeros(x_a.size)
        p0[: grid.n_nodes] = noise.p0_state
        p0[grid.n_nodes :] = [noise.p0_param_for(k) for k in self.coding.kinds]
        self.belief = AugmentedBelief(
            x_a, np.diag(p0), grid.n_nodes, np.zeros(self.coding.n, dtype=bool), time_index=0
        )

    # -- parameter plumbing -------------------------------------------------

    def current_field(self):
        """Merged parameter field: kriged/non-estimable base + live estimates."""
        merged = self.field.copy()
        self.coding.scatter_into_field(merged, self.belief.params_internal)
        return merged

    def set_active_sector_params(self, positions):
        mask = np.zeros(self.coding.n, dtype=bool)
        mask[np.asarray(positions, dtype=int)] = True
        self.belief.active_mask = mask

    def set_active_all(self):
        self.belief.active_mask = np.ones(self.coding.n, dtype=bool)

    # -- model wrappers ------------------------------------------------------

    def _transition(self, forcing, dt):
        def step_fn(head, params_internal, active_idx, _depth=0):
            merged = self.field.copy()
            self.coding.scatter_into_field(merged, params_internal)
            try:
                new_state, lin = step_implicit(
                    FieldState(head.copy()), merged, forcing, self.grid, dt, opts=self.opts, return_linearization=True
                )
            except NonConvergence:
                if _depth >= self.max_dt_halvings:
                    raise
                log.info("halving dt to %.1f s after Newton stall", dt / 2)
                half = self._transition(forcing, dt / 2.0)
                x_m, f_x1, f_p1 = half(head, params_internal, active_idx, _depth + 1)
                x_1, f_x2, f_p2 = half(x_m, params_internal, active_idx, _depth + 1)
                f_p = f_x2 @ f_p1 + f_p2 if f_p1.size else f_p1
                return x_1, f_x2 @ f_x1, f_p
            f_x = lin.step_jacobian_state()
            if active_idx.size:
                cols = np.unique(self.coding.columns[active_idx])
                block = lin.step_jacobian_params(columns=cols)
                pos = {c: i for i, c in enumerate(cols)}
                grab = [pos[c] * N_KINDS + k for c, k in zip(self.coding.columns[active_idx], self.coding.kind_ids[active_idx])]
                f_pa = block[:, grab] * self.coding.chain_factors(params_internal)[active_idx][None, :]
            else:
                f_pa = np.zeros((self.grid.n_nodes, 0))
            return new_state.head, f_x, f_pa

        return step_fn

    def _observation(self, batch):
        def obs_fn(head, params_internal, active_idx):
            merged = self.field.copy()
            self.coding.scatter_into_field(merged, params_internal)
            state = FieldState(head.copy())
            y_hat = observe(state, merged, self.grid, batch.node_columns, batch.penetration_nodes)
            dy_dx, dy_dphi = observe_jacobian(state, merged, self.grid, batch.node_columns, batch.penetration_nodes)
            c_pa = dy_dphi[:, self.coding.indices[active_idx]]
            c_pa = c_pa * self.coding.chain_factors(params_internal)[active_idx][None, :]
            return y_hat, dy_dx, c_pa

        return obs_fn

    # -- filter steps ---------------------------------------------------------

    def predict(self, forcing, dt):
        q_param = np.array([self.noise.q_param_for(k) for k in self.coding.kinds])
        self.belief = ekf_predict(self.belief, self._transition(forcing, dt), self.noise.q_state, q_param)
        return self.belief

    def update(self, batch):
        self.belief, info = ekf_update(
            self.belief,
            batch.values,
            self._observation(batch),
            self.noise.r_unit,
            gate_confidence=self.gate_confidence,
            clamp_fn=lambda p: self.coding.clamp_internal(p, self.bounds),
        )
        if not info.gated:
            active_idx = np.nonzero(self.belief.active_mask)[0]
            self.updated_columns.update(int(c) for c in np.unique(self.coding.columns[active_idx]))
            if self.kriging_enabled:
                self._refresh_nonestimable()
        return self.belief, info

    def _refresh_nonestimable(self):
        if self.nonestimable_columns.size == 0 or len(self.updated_columns) < self.kriging_min_samples:
            return
        merged = self.current_field()
        refreshed = update_nonestimable(
            merged,
            sorted(self.updated_columns),
            self.grid,
            target_columns=self.nonestimable_columns,
            min_samples=self.kriging_min_samples,
            bounds=self.bounds,
        )
        self.field = refreshed

    def estimates_natural(self):
        return self.coding.to_natural(self.belief.params_internal)


@dataclass
class AssimilationResult:
    """Per-step belief trajectory and estimated-parameter history."""

    times: list = field(default_factory=list)
    head_estimates: list = field(default_factory=list)
    param_estimates: list = field(default_factory=list)
    innovations: list = field(default_factory=list)
    active_counts: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def head_array(self):
        return np.array(self.head_estimates)

    def param_array(self):
        return np.array(self.param_estimates)


def active_positions_for_batch(coding, batch):
    """Estimable-vector positions belonging to the batch's measured columns."""
    return np.nonzero(np.isin(coding.columns, np.asarray(batch.node_columns, dtype=int)))[0]


def run_assimilation(ekf, batches, forcing_for, dt, n_steps, active_for_batch=None, on_step=None, max_consecutive_failures=5):
    """Drive the filter across a horizon with time-tagged measurement batches.

    ``batches`` maps time index -> MeasurementBatch (arriving after the
    predict of that step).  ``forcing_for(k)`` supplies the step's forcing.
    ``active_for_batch(batch)`` selects which estimable entries are being
    estimated while that batch's sector is measured (the masked-EKF mode);
    with None, every estimable parameter stays active at all times (the
    estimate-everything configuration).  ``on_step(k, ekf, batch)`` runs after
    each completed step, e.g. to score held-out measurements.
    """
    by_time = {int(b.time_index): b for b in batches} if not isinstance(batches, dict) else batches
    if any(k < 1 for k in by_time):
        raise ValueError("batches must arrive at step >= 1, after the first predict")
    result = AssimilationResult()
    consecutive = 0
    for k in range(1, n_steps + 1):
        batch = by_time.get(k)
        if active_for_batch is not None:
            positions = active_for_batch(batch) if batch is not None else np.empty(0, dtype=int)
            ekf.set_active_sector_params(positions)
        else:
            ekf.set_active_all()
        try:
            ekf.predict(forcing_for(k - 1), dt)
            if batch is not None:
                _, info = ekf.update(batch)
                result.innovations.append((k, float(info.normalized_sq), bool(info.gated)))
            consecutive = 0
        except NonConvergence as err:
            consecutive += 1
            result.failures.append((k, str(err)))
            log.error("step %d failed: %s", k, err)
            if consecutive >= max_consecutive_failures:
                raise
            ekf.belief.time_index += 1
        result.times.append(k)
        result.head_estimates.append(ekf.belief.head.copy())
        result.param_estimates.append(ekf.estimates_natural())
        result.active_counts.append(int(ekf.belief.active_mask.sum()))
        if on_step is not None:
            on_step(k, ekf, batch)
    return result
