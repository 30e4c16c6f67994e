"""Forward parameter sensitivities of the field model and their rank analysis.

The state sensitivity matrix ``x_phi = d(head)/d(phi)`` starts at zero and is
advanced through the same backward-Euler linearization as the state itself:
both solves reuse one factorized Newton Jacobian per step.  Output
sensitivities are scaled to dimensionless form, grouped per azimuthal sector
across pivot rotations (only batches sharing the same measured node set carry
comparable information), and the numerical rank of each accumulated sector
matrix is read off the singular value spectrum.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScaling, SectorMismatch
from .field_model import DEFAULT_OPTIONS, observe_jacobian, step_implicit
from .hydraulics import PARAM_KINDS

N_KINDS = len(PARAM_KINDS)


@dataclass(eq=False)
class SensitivityState:
    """d(head)/d(phi) for the parameters of a set of surface columns.

    ``columns`` lists the surface columns whose five parameters form the
    matrix columns (node-major, kind order of :data:`PARAM_KINDS`); at desk
    scale this is every column, at field scale it may be restricted to the
    measured sector plus a halo.
    """

    x_phi: np.ndarray
    columns: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=int)
        if self.x_phi.shape[1] != self.columns.size * N_KINDS:
            raise ValueError("x_phi width must be 5 per tracked column")
        if not np.all(np.isfinite(self.x_phi)):
            raise ValueError("x_phi must be finite")

    @classmethod
    def zeros(cls, grid, columns=None):
        cols = np.arange(grid.n_columns) if columns is None else np.asarray(columns, dtype=int)
        return cls(x_phi=np.zeros((grid.n_nodes, cols.size * N_KINDS)), columns=cols)

    @property
    def param_indices(self):
        """Flat indices into the global parameter vector, matrix-column order."""
        return (self.columns[:, None] * N_KINDS + np.arange(N_KINDS)[None, :]).reshape(-1)


def propagate_sensitivity(state, sens, params, forcing, grid, dt, opts=DEFAULT_OPTIONS):
    """Advance state and sensitivity one implicit step; returns both.

    Implicit differentiation of the converged residual R(h1; h0, phi) = 0
    gives  x_phi(k+1) = J^-1 (C(h0) x_phi(k) - dR/dphi)  with J the Newton
    Jacobian at the converged head, factorized once and reused here.
    """
    new_state, lin = step_implicit(state, params, forcing, grid, dt, opts=opts, return_linearization=True)
    drdp = lin.residual_param_jacobian(columns=sens.columns)
    x_phi = lin.propagate(sens.x_phi * lin.capacity0[:, None] - drdp)
    return new_state, SensitivityState(x_phi=x_phi, columns=sens.columns, time_index=sens.time_index + 1)


def output_sensitivity(sens, state, params, grid, node_columns, penetration_nodes):
    """d(observations)/d(phi) for one batch: N_y rows, one per measured column."""
    dy_dx, dy_dphi = observe_jacobian(state, params, grid, node_columns, penetration_nodes)
    return dy_dx @ sens.x_phi + dy_dphi[:, sens.param_indices]


def scale(s_y, phi_values, y_values):
    """Nondimensionalize: element (i, j) becomes (phi_j / y_i) * S_y[i, j]."""
    y = np.asarray(y_values, dtype=float)
    if np.any(np.abs(y) < 1e-9):
        raise DegenerateScaling("observation values too close to zero for relative scaling")
    phi = np.asarray(phi_values, dtype=float)
    return np.asarray(s_y, dtype=float) * (phi[None, :] / y[:, None])


@dataclass(eq=False)
class SectorSensitivity:
    """Scaled output sensitivity rows accumulated for one azimuthal sector."""

    sector_id: int
    node_columns: np.ndarray
    param_indices: np.ndarray
    rows: np.ndarray = None
    row_times: list = field(default_factory=list)

    def __post_init__(self):
        self.node_columns = np.asarray(self.node_columns, dtype=int)
        self.param_indices = np.asarray(self.param_indices, dtype=int)
        if self.rows is None:
            self.rows = np.zeros((0, self.param_indices.size))

    @property
    def n_rows(self):
        return self.rows.shape[0]


def accumulate(store, batch, s_tilde):
    """Append one batch's scaled sensitivity rows to its sector store.

    Only batches whose measured node set equals the store's node set carry
    the same information; anything else raises :class:`SectorMismatch`.
    """
    if not np.array_equal(np.sort(batch.node_columns), np.sort(store.node_columns)):
        raise SectorMismatch(
            f"batch columns {batch.node_columns.tolist()} do not match sector {store.sector_id}"
        )
    s_tilde = np.asarray(s_tilde, dtype=float)
    if s_tilde.shape != (batch.n_y, store.param_indices.size):
        raise ValueError("scaled sensitivity shape does not match the sector store")
    order = np.argsort(batch.node_columns)
    canonical = np.argsort(np.argsort(store.node_columns))
    store.rows = np.vstack([store.rows, s_tilde[order][canonical]])
    store.row_times.extend([batch.time_index] * batch.n_y)
    return store


@dataclass
class RankResult:
    singular_values: np.ndarray
    rank: int
    gap_decades: float
    method: str  # "gap" | "threshold"


def rank_analysis(sector, gap_decades=3.0, rel_floor=1e-10):
    """Numerical rank of an accumulated sector matrix from its SVD.

    The rank is placed at the largest log10 gap between consecutive singular
    values provided it spans at least ``gap_decades`` decades; if no gap
    qualifies, it falls back to counting values above ``rel_floor * sigma_1``.
    """
    matrix = sector.rows if isinstance(sector, SectorSensitivity) else np.asarray(sector, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError("rank analysis needs a matrix with at least one row")
    sigma = np.linalg.svd(matrix, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return RankResult(sigma, 0, np.inf, "gap")
    # floor exact zeros far below double-precision noise so the detector sees
    # the physical gap rather than an infinite jump to underflow
    floored = np.maximum(sigma, sigma[0] * 1e-18)
    logs = np.log10(floored)
    if sigma.size == 1:
        return RankResult(sigma, 1, np.inf, "gap")
    gaps = logs[:-1] - logs[1:]
    best = int(np.argmax(gaps))
    if gaps[best] >= gap_decades:
        return RankResult(sigma, best + 1, float(gaps[best]), "gap")
    rank = int(np.sum(sigma > rel_floor * sigma[0]))
    return RankResult(sigma, rank, float(gaps[best]), "threshold")
