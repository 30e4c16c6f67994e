"""Cylindrical grid, discretized Richards dynamics and the implicit stepper.

The pressure-head field on an ``n_r x n_theta x n_z`` cylindrical grid is
stored as a flat vector with axial index fastest:

    index(i_r, i_theta, i_z) = (i_r * n_theta + i_theta) * n_z + i_z

so one surface column occupies a contiguous slice and its shallowest node
sits at the end of that slice (``z`` increases upward, the surface is at
``z = depth_m``).

Spatial discretization is a finite-volume two-point flux scheme: radial nodes
start at ``dr/2`` (no node on the axis), interface conductivities default to
the arithmetic mean of the two adjacent nodes, and the axial flux carries the
unit gravity gradient.  Boundaries: no radial flux at the inner and outer
radius, free drainage (unit total-head gradient) at the bottom, a prescribed
net flux (irrigation minus surface evaporation) at the top.  Quadrant grids
get no-flux walls at both azimuthal edges; full circles are periodic.

Time stepping is backward Euler solved with Newton on the conservative
residual

    storage(h1) - storage(h0) + dt * (outflow(h1)/V + sink(h1)) = 0

whose Jacobian involves the capillary capacity only as a multiplier, never as
a divisor, and which conserves the discrete water volume of a sealed domain
to solver tolerance.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergence
from .hydraulics import (
    PARAM_KINDS,
    SoilHydraulics,
    capacity,
    conductivity,
    hydraulic_derivatives,
    storage,
    water_content,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# grid and state containers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CylGrid:
    """Cylindrical discretization of a (possibly partial) circular field."""

    n_r: int
    n_theta: int
    n_z: int
    radius_m: float
    depth_m: float
    theta_span_rad: float = 2.0 * np.pi
    z_coords: np.ndarray = None  # node centres, strictly increasing in (0, depth)

    def __post_init__(self):
        if min(self.n_r, self.n_theta, self.n_z) < 1:
            raise ValueError("node counts must be positive")
        if self.radius_m <= 0 or self.depth_m <= 0:
            raise ValueError("radius and depth must be positive")
        if not 0 < self.theta_span_rad <= 2.0 * np.pi + 1e-12:
            raise ValueError("theta span must lie in (0, 2*pi]")
        self.dr = self.radius_m / self.n_r
        self.dtheta = self.theta_span_rad / self.n_theta
        self.r_coords = (np.arange(self.n_r) + 0.5) * self.dr
        if self.z_coords is None:
            faces = np.linspace(0.0, self.depth_m, self.n_z + 1)
            self.z_coords = 0.5 * (faces[:-1] + faces[1:])
            self.z_faces = faces
        else:
            self.z_coords = np.asarray(self.z_coords, dtype=float)
            if self.z_coords.shape != (self.n_z,):
                raise ValueError("z_coords must have n_z entries")
            if np.any(np.diff(self.z_coords) <= 0):
                raise ValueError("z_coords must be strictly increasing")
            if self.z_coords[0] <= 0 or self.z_coords[-1] >= self.depth_m:
                raise ValueError("z_coords must lie strictly inside (0, depth_m)")
            mids = 0.5 * (self.z_coords[:-1] + self.z_coords[1:])
            self.z_faces = np.concatenate(([0.0], mids, [self.depth_m]))
        self.dz_layers = np.diff(self.z_faces)

    @property
    def periodic(self):
        """Azimuthal topology follows the span: a full circle wraps around."""
        return abs(self.theta_span_rad - 2.0 * np.pi) < 1e-9 and self.n_theta > 1

    @property
    def azimuthal_topology(self):
        return "periodic" if self.periodic else "bounded"

    @property
    def n_nodes(self):
        return self.n_r * self.n_theta * self.n_z

    @property
    def n_columns(self):
        return self.n_r * self.n_theta

    def node_index(self, i_r, i_theta, i_z):
        return (i_r * self.n_theta + i_theta) * self.n_z + i_z

    def column_index(self, i_r, i_theta):
        return i_r * self.n_theta + i_theta

    def column_slice(self, column):
        return slice(column * self.n_z, (column + 1) * self.n_z)

    def column_of_node(self, node):
        return node // self.n_z

    def surface_node(self, column):
        return column * self.n_z + self.n_z - 1

    def sector_columns(self, i_theta):
        """All surface columns of one azimuthal sector, ordered by radius."""
        return np.arange(self.n_r) * self.n_theta + i_theta

    def column_xy(self):
        """Planar coordinates of the surface columns (for interpolation)."""
        rr = np.repeat(self.r_coords, self.n_theta)
        tt = np.tile((np.arange(self.n_theta) + 0.5) * self.dtheta, self.n_r)
        return np.column_stack([rr * np.cos(tt), rr * np.sin(tt)])

    def cell_volumes(self):
        """Exact annular cell volumes, flattened in node order."""
        r_in = self.r_coords - 0.5 * self.dr
        r_out = self.r_coords + 0.5 * self.dr
        ring = 0.5 * (r_out**2 - r_in**2) * self.dtheta  # per sector
        vol = ring[:, None, None] * np.ones((1, self.n_theta, 1)) * self.dz_layers[None, None, :]
        return vol.reshape(-1)

    def penetration_nodes_for_depth(self, depth_m):
        """Number of whole surface layers within a sensing depth."""
        below = self.depth_m - self.z_faces[::-1]
        count = int(np.searchsorted(below, depth_m + 1e-12))
        return max(1, min(count, self.n_z))


@dataclass(eq=False)
class FieldState:
    """Pressure-head vector for every node of a grid (m)."""

    head: np.ndarray

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=float)
        if not np.all(np.isfinite(self.head)):
            raise ValueError("head must be finite")

    def copy(self):
        return FieldState(self.head.copy())


@dataclass(eq=False)
class ParameterField:
    """Per-surface-column hydraulic parameters, identical down each column."""

    params: SoilHydraulics  # array-valued fields of shape (n_columns,)
    n_columns: int

    def __post_init__(self):
        for kind in PARAM_KINDS:
            arr = np.asarray(self.params.kind(kind), dtype=float)
            if arr.shape != (self.n_columns,):
                raise ValueError(f"{kind} must have one value per surface column")

    @classmethod
    def uniform(cls, grid, soil):
        cols = grid.n_columns
        fields = {k: np.full(cols, float(np.asarray(soil.kind(k)))) for k in PARAM_KINDS}
        return cls(SoilHydraulics(s_r=soil.s_r, **fields), cols)

    @property
    def n_params(self):
        return len(PARAM_KINDS) * self.n_columns

    def node_params(self, grid):
        """Expand to one parameter set per grid node (axially homogeneous)."""
        fields = {k: np.repeat(np.asarray(self.params.kind(k)), grid.n_z) for k in PARAM_KINDS}
        s_r = np.asarray(self.params.s_r)
        s_r = np.repeat(s_r, grid.n_z) if s_r.ndim else s_r
        return SoilHydraulics(s_r=s_r, **fields)

    def to_vector(self):
        """Flatten node-major: [k_s, theta_s, theta_r, alpha, n] per column."""
        mat = np.column_stack([np.asarray(self.params.kind(k)) for k in PARAM_KINDS])
        return mat.reshape(-1)

    @classmethod
    def from_vector(cls, vec, n_columns, s_r=1e-4):
        mat = np.asarray(vec, dtype=float).reshape(n_columns, len(PARAM_KINDS))
        fields = {k: mat[:, i].copy() for i, k in enumerate(PARAM_KINDS)}
        return cls(SoilHydraulics(s_r=s_r, **fields), n_columns)

    def copy(self):
        fields = {k: np.asarray(self.params.kind(k)).copy() for k in PARAM_KINDS}
        return ParameterField(SoilHydraulics(s_r=self.params.s_r, **fields), self.n_columns)


def param_index(column, kind):
    """Global index of one scalar parameter in the flattened vector."""
    return column * len(PARAM_KINDS) + PARAM_KINDS.index(kind)


def param_label(index, grid):
    """Human-readable name for a flat parameter index."""
    column, k = divmod(index, len(PARAM_KINDS))
    i_r, i_theta = divmod(column, grid.n_theta)
    return f"{PARAM_KINDS[k]}[r={i_r},theta={i_theta}]"


@dataclass(eq=False)
class SurfaceForcing:
    """Surface water fluxes per column (m/s, non-negative rates).

    ``evapotranspiration`` is the total crop ET demand; a fixed fraction
    leaves as surface evaporation through the top boundary and the remainder
    drives root extraction within the root zone.
    """

    irrigation: np.ndarray
    evapotranspiration: np.ndarray
    evaporation_fraction: float = 0.3
    sink: np.ndarray = None  # optional explicit per-node override (1/s)

    def __post_init__(self):
        self.irrigation = np.asarray(self.irrigation, dtype=float)
        self.evapotranspiration = np.asarray(self.evapotranspiration, dtype=float)
        if np.any(self.irrigation < 0) or np.any(self.evapotranspiration < 0):
            raise ValueError("forcing rates must be non-negative")

    @classmethod
    def zero(cls, grid):
        z = np.zeros(grid.n_columns)
        return cls(irrigation=z, evapotranspiration=z.copy())

    @property
    def surface_evaporation(self):
        return self.evaporation_fraction * self.evapotranspiration

    @property
    def transpiration(self):
        return (1.0 - self.evaporation_fraction) * self.evapotranspiration


@dataclass(eq=False)
class MeasurementBatch:
    """Soil-moisture observations of some surface columns at one time step."""

    time_index: int
    node_columns: np.ndarray
    penetration_nodes: int
    values: np.ndarray

    def __post_init__(self):
        self.node_columns = np.asarray(self.node_columns, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if len(np.unique(self.node_columns)) != self.node_columns.size:
            raise ValueError("node_columns must be distinct")
        if self.values.shape != self.node_columns.shape:
            raise ValueError("values must align with node_columns")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("moisture values must lie in [0, 1]")

    @property
    def n_y(self):
        return self.node_columns.size


@dataclass
class FeddesParams:
    """Piecewise-linear water-stress response of root uptake."""

    h_anaerobiosis: float = -0.1
    h_optimal_wet: float = -0.25
    h_optimal_dry: float = -4.0
    h_wilting: float = -150.0


@dataclass
class SolverOptions:
    """Boundary handling and Newton controls for the implicit stepper."""

    top: str = "flux"  # "flux" | "sealed"
    bottom: str = "free_drainage"  # "free_drainage" | "sealed"
    interface_mean: str = "arithmetic"  # "arithmetic" | "harmonic"
    newton_tol: float = 1e-8
    max_iterations: int = 50
    evap_gradient_limit: float = 100.0
    root_depth_m: float = 0.15
    feddes: FeddesParams = field(default_factory=FeddesParams)

    def sealed(self):
        return replace(self, top="sealed", bottom="sealed")


DEFAULT_OPTIONS = SolverOptions()


# ---------------------------------------------------------------------------
# root water extraction
# ---------------------------------------------------------------------------


def feddes_stress(h, fd):
    """Dimensionless uptake reduction factor of the pressure head."""
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    wet_ramp = (h < fd.h_anaerobiosis) & (h > fd.h_optimal_wet)
    out[wet_ramp] = (h[wet_ramp] - fd.h_anaerobiosis) / (fd.h_optimal_wet - fd.h_anaerobiosis)
    optimal = (h <= fd.h_optimal_wet) & (h >= fd.h_optimal_dry)
    out[optimal] = 1.0
    dry_ramp = (h < fd.h_optimal_dry) & (h > fd.h_wilting)
    out[dry_ramp] = (h[dry_ramp] - fd.h_wilting) / (fd.h_optimal_dry - fd.h_wilting)
    return out


def feddes_stress_derivative(h, fd):
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    wet_ramp = (h < fd.h_anaerobiosis) & (h > fd.h_optimal_wet)
    out[wet_ramp] = 1.0 / (fd.h_optimal_wet - fd.h_anaerobiosis)
    dry_ramp = (h < fd.h_optimal_dry) & (h > fd.h_wilting)
    out[dry_ramp] = 1.0 / (fd.h_optimal_dry - fd.h_wilting)
    return out


def _root_weights(grid, root_depth):
    """Fraction of the transpiration demand taken from each axial layer."""
    top = grid.depth_m
    zone_bottom = max(top - root_depth, 0.0)
    overlap = np.minimum(grid.z_faces[1:], top) - np.maximum(grid.z_faces[:-1], zone_bottom)
    overlap = np.clip(overlap, 0.0, None)
    overlap[overlap < 1e-9 * grid.depth_m] = 0.0  # drop face-rounding dust
    total = overlap.sum()
    if total <= 0:
        return np.zeros(grid.n_z)
    return overlap / total


def sink_field(state, grid, crop_et, root_depth, feddes=None):
    """Volumetric root-extraction rate per node (m3 m-3 s-1).

    ``crop_et`` is the column transpiration demand (m/s), scalar or one value
    per surface column.  The demand is spread over the layers inside the root
    zone proportionally to layer thickness and reduced by the Feddes stress
    factor, so the column integral never exceeds the demand.
    """
    fd = feddes or FeddesParams()
    weights = _root_weights(grid, root_depth)
    demand = np.broadcast_to(np.asarray(crop_et, dtype=float), (grid.n_columns,))
    h3 = state.head.reshape(grid.n_columns, grid.n_z)
    stress = feddes_stress(h3, fd)
    thickness = grid.dz_layers
    with np.errstate(invalid="ignore", divide="ignore"):
        per_layer = np.where(weights > 0, weights / thickness, 0.0)
    sink = demand[:, None] * per_layer[None, :] * stress
    return sink.reshape(-1)


def _sink_and_derivative(head, grid, transpiration, opts):
    fd = opts.feddes
    weights = _root_weights(grid, opts.root_depth_m)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_layer = np.where(weights > 0, weights / grid.dz_layers, 0.0)
    h2 = head.reshape(grid.n_columns, grid.n_z)
    demand = np.broadcast_to(np.asarray(transpiration, dtype=float), (grid.n_columns,))
    base = demand[:, None] * per_layer[None, :]
    sink = base * feddes_stress(h2, fd)
    dsink = base * feddes_stress_derivative(h2, fd)
    return sink.reshape(-1), dsink.reshape(-1)


# ---------------------------------------------------------------------------
# finite-volume flux assembly
# ---------------------------------------------------------------------------


class _Faces:
    """Geometry of all interior faces, cached per grid instance."""

    def __init__(self, grid):
        nr, nt, nz = grid.n_r, grid.n_theta, grid.n_z
        shape = (nr, nt, nz)
        idx = np.arange(grid.n_nodes).reshape(shape)
        self.volumes = grid.cell_volumes().reshape(shape)

        # radial faces between (i, :, :) and (i+1, :, :)
        r_face = grid.r_coords[:-1] + 0.5 * grid.dr
        self.rad_a = idx[:-1].reshape(-1)
        self.rad_b = idx[1:].reshape(-1)
        area = r_face[:, None, None] * grid.dtheta * grid.dz_layers[None, None, :]
        self.rad_area = np.broadcast_to(area, (nr - 1, nt, nz)).reshape(-1)
        self.rad_dist = np.full(self.rad_a.size, grid.dr)

        # azimuthal faces between (:, j, :) and (:, j+1, :), wrapping if periodic
        if nt > 1:
            j_hi = np.roll(np.arange(nt), -1) if grid.periodic else np.arange(1, nt)
            j_lo = np.arange(nt) if grid.periodic else np.arange(nt - 1)
            self.az_a = idx[:, j_lo, :].reshape(-1)
            self.az_b = idx[:, j_hi, :].reshape(-1)
            area = grid.dr * grid.dz_layers[None, None, :] * np.ones((nr, j_lo.size, 1))
            self.az_area = area.reshape(-1)
            dist = grid.r_coords[:, None, None] * grid.dtheta * np.ones((1, j_lo.size, nz))
            self.az_dist = dist.reshape(-1)
        else:
            self.az_a = self.az_b = np.empty(0, dtype=int)
            self.az_area = self.az_dist = np.empty(0)

        # axial faces between (:, :, k) and (:, :, k+1); gravity acts here
        self.ax_a = idx[:, :, :-1].reshape(-1)
        self.ax_b = idx[:, :, 1:].reshape(-1)
        horiz = grid.r_coords[:, None, None] * grid.dr * grid.dtheta
        self.ax_area = np.broadcast_to(horiz, (nr, nt, nz - 1)).reshape(-1)
        self.ax_dist = np.broadcast_to(np.diff(grid.z_coords)[None, None, :], (nr, nt, nz - 1)).reshape(-1)

        self.top_nodes = idx[:, :, -1].reshape(-1)
        self.bottom_nodes = idx[:, :, 0].reshape(-1)
        self.horiz_area = np.repeat(grid.r_coords * grid.dr * grid.dtheta, nt)
        self.z_node = np.broadcast_to(grid.z_coords[None, None, :], shape).reshape(-1)


def _faces(grid):
    cached = getattr(grid, "_face_cache", None)
    if cached is None:
        cached = _Faces(grid)
        grid._face_cache = cached
    return cached


def _interface_k(k_a, k_b, mode):
    if mode == "harmonic":
        return 2.0 * k_a * k_b / np.maximum(k_a + k_b, 1e-300)
    return 0.5 * (k_a + k_b)


def flux_between(state, params, grid, node_a, node_b, opts=DEFAULT_OPTIONS):
    """Discrete volumetric flux (m3/s) from node_a to its neighbor node_b.

    Scalar reference path used by tests; the vectorized assembly applies the
    same arithmetic to every face at once.
    """
    fc = _faces(grid)
    nodes = params.node_params(grid)
    k = conductivity(state.head, nodes)
    for a_arr, b_arr, area, dist, grav in (
        (fc.rad_a, fc.rad_b, fc.rad_area, fc.rad_dist, False),
        (fc.az_a, fc.az_b, fc.az_area, fc.az_dist, False),
        (fc.ax_a, fc.ax_b, fc.ax_area, fc.ax_dist, True),
    ):
        for sign, aa, bb in ((1.0, a_arr, b_arr), (-1.0, b_arr, a_arr)):
            match = np.nonzero((aa == node_a) & (bb == node_b))[0]
            if match.size:
                i = match[0]
                pot_a = state.head[node_a] + (fc.z_node[node_a] if grav else 0.0)
                pot_b = state.head[node_b] + (fc.z_node[node_b] if grav else 0.0)
                kf = _interface_k(k[node_a], k[node_b], opts.interface_mean)
                return area[i] * kf * (pot_a - pot_b) / dist[i]
    raise ValueError("nodes are not face neighbors")


def _assemble(head, grid, nodes, forcing, opts, need_jacobian):
    """Net volumetric outflow per node and, optionally, its head Jacobian.

    Returns ``(outflow, jac, cap_mask)`` where ``outflow`` has units m3/s,
    ``jac`` is a COO triple ``(rows, cols, vals)`` of d(outflow)/dh or None,
    and ``cap_mask`` marks columns whose evaporative top flux was limited.
    """
    fc = _faces(grid)
    k = conductivity(head, nodes)
    dk = None
    if need_jacobian:
        deriv = hydraulic_derivatives(head, nodes)
        dk = deriv.dk_dh

    out = np.zeros(grid.n_nodes)
    rows, cols, vals = [], [], []

    def add_faces(a, b, area, dist, gravity):
        if a.size == 0:
            return
        pot_a, pot_b = head[a], head[b]
        if gravity:
            pot_a = pot_a + fc.z_node[a]
            pot_b = pot_b + fc.z_node[b]
        kf = _interface_k(k[a], k[b], opts.interface_mean)
        grad = (pot_a - pot_b) / dist
        flux = area * kf * grad
        np.add.at(out, a, flux)
        np.add.at(out, b, -flux)
        if need_jacobian:
            # arithmetic interface mean: dkf/dh_a = dk[a]/2
            dflux_da = area * (0.5 * dk[a] * grad + kf / dist)
            dflux_db = area * (0.5 * dk[b] * grad - kf / dist)
            rows.extend((a, a, b, b))
            cols.extend((a, b, a, b))
            vals.extend((dflux_da, dflux_db, -dflux_da, -dflux_db))

    add_faces(fc.rad_a, fc.rad_b, fc.rad_area, fc.rad_dist, gravity=False)
    add_faces(fc.az_a, fc.az_b, fc.az_area, fc.az_dist, gravity=False)
    add_faces(fc.ax_a, fc.ax_b, fc.ax_area, fc.ax_dist, gravity=True)

    if opts.bottom == "free_drainage":
        bn = fc.bottom_nodes
        np.add.at(out, bn, fc.horiz_area * k[bn])
        if need_jacobian:
            rows.append(bn)
            cols.append(bn)
            vals.append(fc.horiz_area * dk[bn])

    cap_mask = np.zeros(grid.n_columns, dtype=bool)
    if opts.top == "flux":
        tn = fc.top_nodes
        demanded = forcing.surface_evaporation - forcing.irrigation
        limit = k[tn] * opts.evap_gradient_limit
        cap_mask = demanded > limit
        applied = np.where(cap_mask, limit, demanded)
        np.add.at(out, tn, fc.horiz_area * applied)
        if need_jacobian and np.any(cap_mask):
            rows.append(tn[cap_mask])
            cols.append(tn[cap_mask])
            vals.append(fc.horiz_area[cap_mask] * opts.evap_gradient_limit * dk[tn[cap_mask]])

    jac = None
    if need_jacobian:
        jac = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    return out, jac, cap_mask


def rhs(state, params, forcing, grid, opts=DEFAULT_OPTIONS):
    """Instantaneous d(head)/dt of the discretized Richards equation (m/s)."""
    if not np.all(np.isfinite(state.head)):
        raise ValueError("state contains non-finite head values")
    nodes = params.node_params(grid)
    out, _, cap_mask = _assemble(state.head, grid, nodes, forcing, opts, need_jacobian=False)
    if np.any(cap_mask):
        log.warning("evaporative top flux limited on %d columns", int(cap_mask.sum()))
    sink, _ = _sink_and_derivative(state.head, grid, forcing.transpiration, opts)
    if forcing.sink is not None:
        sink = np.asarray(forcing.sink, dtype=float)
    volumes = _faces(grid).volumes.reshape(-1)
    moisture_rate = -out / volumes - sink
    return moisture_rate / capacity(state.head, nodes)


# ---------------------------------------------------------------------------
# implicit stepping
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class StepLinearization:
    """Factorized Newton system of one converged implicit step.

    Enough to differentiate the discrete step map: for the implicit residual
    R(h1; h0, phi) = 0 the sensitivities follow from

        dh1/dh0  = J^-1 diag(C(h0))
        dh1/dphi = -J^-1 dR/dphi

    with J the converged residual Jacobian held here in factored form.
    """

    lu: object
    dt: float
    head0: np.ndarray
    head1: np.ndarray
    capacity0: np.ndarray
    grid: CylGrid
    params: ParameterField
    forcing: SurfaceForcing
    opts: SolverOptions

    def propagate(self, rhs_matrix):
        """Solve J X = rhs for one or many right-hand sides."""
        return self.lu.solve(np.asarray(rhs_matrix))

    def step_jacobian_state(self):
        """Dense dh1/dh0 of the step map."""
        return self.lu.solve(np.diag(self.capacity0))

    def residual_param_jacobian(self, columns=None):
        """Dense dR/dphi for the parameters of the given surface columns.

        Column order is node-major over ``columns`` with the kind order of
        :data:`PARAM_KINDS`; ``columns=None`` selects every surface column.
        """
        return _residual_param_jacobian(
            self.head0, self.head1, self.grid, self.params, self.forcing, self.opts, self.dt, columns
        )

    def step_jacobian_params(self, columns=None):
        """Dense dh1/dphi of the step map."""
        drdp = self.residual_param_jacobian(columns)
        if drdp.shape[1] == 0:
            return drdp
        return self.lu.solve(-drdp)


def _residual_and_jacobian(head1, head0, grid, nodes, forcing, opts, dt):
    volumes = _faces(grid).volumes.reshape(-1)
    out, jac, _ = _assemble(head1, grid, nodes, forcing, opts, need_jacobian=True)
    sink, dsink = _sink_and_derivative(head1, grid, forcing.transpiration, opts)
    if forcing.sink is not None:
        sink = np.asarray(forcing.sink, dtype=float)
        dsink = np.zeros_like(sink)
    residual = storage(head1, nodes) - storage(head0, nodes) + dt * (out / volumes + sink)
    rows, cols, vals = jac
    scale = dt / volumes[rows]
    diag_rows = np.arange(grid.n_nodes)
    diag_vals = capacity(head1, nodes) + dt * dsink
    matrix = sp.csc_matrix(
        (np.concatenate([vals * scale, diag_vals]), (np.concatenate([rows, diag_rows]), np.concatenate([cols, diag_rows]))),
        shape=(grid.n_nodes, grid.n_nodes),
    )
    return residual, matrix


def step_implicit(state, params, forcing, grid, dt, opts=DEFAULT_OPTIONS, return_linearization=False):
    """One backward-Euler step of length ``dt`` (s) solved with damped Newton.

    Raises :class:`NonConvergence` (with the last residual norm attached) if
    the increment infinity norm does not drop below ``opts.newton_tol`` within
    ``opts.max_iterations`` iterations; callers may halve ``dt`` and retry.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not np.all(np.isfinite(state.head)):
        raise ValueError("state contains non-finite head values")
    nodes = params.node_params(grid)
    head0 = state.head
    head = head0.copy()

    residual, matrix = _residual_and_jacobian(head, head0, grid, nodes, forcing, opts, dt)
    res_norm = np.linalg.norm(residual)
    lu = None
    for _ in range(opts.max_iterations):
        lu = spla.splu(matrix)
        delta = lu.solve(-residual)
        # backtracking line search with semismooth handling of the saturation
        # boundary: a node may not jump across h=0 in one iteration (the
        # capacity branch and the unbounded K slope there cause chattering),
        # it lands on the boundary first and continues from the new branch
        lam = 1.0
        best = None
        for _ in range(12):
            trial = head + lam * delta
            crossed_up = (head < 0.0) & (trial >= 0.0)
            crossed_down = (head >= 0.0) & (trial < 0.0)
            trial[crossed_up] = 0.0
            trial[crossed_down] = -1e-9
            trial_res, trial_mat = _residual_and_jacobian(trial, head0, grid, nodes, forcing, opts, dt)
            trial_norm = np.linalg.norm(trial_res)
            if np.isfinite(trial_norm) and (best is None or trial_norm < best[0]):
                best = (trial_norm, trial, trial_res, trial_mat)
            if np.isfinite(trial_norm) and trial_norm <= res_norm:
                break
            lam *= 0.5
        trial_norm, trial, trial_res, trial_mat = best
        applied = trial - head
        head = trial
        residual, matrix, res_norm = trial_res, trial_mat, trial_norm
        if np.max(np.abs(applied)) < opts.newton_tol:
            new_state = FieldState(head)
            if return_linearization:
                # factorize the Jacobian at the converged head for reuse
                lu = spla.splu(matrix)
                lin = StepLinearization(
                    lu=lu,
                    dt=dt,
                    head0=head0.copy(),
                    head1=head.copy(),
                    capacity0=capacity(head0, nodes),
                    grid=grid,
                    params=params,
                    forcing=forcing,
                    opts=opts,
                )
                return new_state, lin
            return new_state
    raise NonConvergence(
        f"Newton stalled after {opts.max_iterations} iterations",
        residual_norm=float(res_norm),
        iterations=opts.max_iterations,
    )


def _residual_param_jacobian(head0, head1, grid, params, forcing, opts, dt, columns=None):
    """dR/dphi of the converged implicit residual, dense over selected columns."""
    if columns is None:
        columns = np.arange(grid.n_columns)
    columns = np.asarray(columns, dtype=int)
    n_kinds = len(PARAM_KINDS)
    col_pos = -np.ones(grid.n_columns, dtype=int)
    col_pos[columns] = np.arange(columns.size)

    nodes = params.node_params(grid)
    fc = _faces(grid)
    volumes = fc.volumes.reshape(-1)
    node_col = np.arange(grid.n_nodes) // grid.n_z

    der1 = hydraulic_derivatives(head1, nodes)
    der0 = hydraulic_derivatives(head0, nodes)
    k1 = conductivity(head1, nodes)

    out = np.zeros((grid.n_nodes, columns.size * n_kinds))

    def scatter(rows, cols_of_nodes, kind_idx, vals):
        sel = col_pos[cols_of_nodes]
        keep = sel >= 0
        if not np.any(keep):
            return
        np.add.at(out, (rows[keep], sel[keep] * n_kinds + kind_idx), vals[keep])

    # storage difference: columns of the node's own parameters
    all_nodes = np.arange(grid.n_nodes)
    for ki, kind in enumerate(PARAM_KINDS):
        scatter(all_nodes, node_col, ki, der1.dtheta[kind] - der0.dtheta[kind])

    # interior fluxes: interface K is the arithmetic mean, so each side node's
    # parameters contribute half its dK to both adjacent residual rows
    def flux_terms(a, b, area, dist, gravity):
        if a.size == 0:
            return
        pot_a, pot_b = head1[a], head1[b]
        if gravity:
            pot_a = pot_a + fc.z_node[a]
            pot_b = pot_b + fc.z_node[b]
        grad = (pot_a - pot_b) / dist
        base = area * grad
        for ki, kind in enumerate(PARAM_KINDS):
            for side in (a, b):
                dflux = 0.5 * base * der1.dk[kind][side]
                scatter(a, node_col[side], ki, dt / volumes[a] * dflux)
                scatter(b, node_col[side], ki, -dt / volumes[b] * dflux)

    flux_terms(fc.rad_a, fc.rad_b, fc.rad_area, fc.rad_dist, gravity=False)
    flux_terms(fc.az_a, fc.az_b, fc.az_area, fc.az_dist, gravity=False)
    flux_terms(fc.ax_a, fc.ax_b, fc.ax_area, fc.ax_dist, gravity=True)

    if opts.bottom == "free_drainage":
        bn = fc.bottom_nodes
        for ki, kind in enumerate(PARAM_KINDS):
            scatter(bn, node_col[bn], ki, dt / volumes[bn] * fc.horiz_area * der1.dk[kind][bn])

    if opts.top == "flux":
        tn = fc.top_nodes
        demanded = forcing.surface_evaporation - forcing.irrigation
        capped = demanded > k1[tn] * opts.evap_gradient_limit
        if np.any(capped):
            for ki, kind in enumerate(PARAM_KINDS):
                vals = dt / volumes[tn] * fc.horiz_area * opts.evap_gradient_limit * der1.dk[kind][tn]
                scatter(tn[capped], node_col[tn[capped]], ki, vals[capped])

    return out


# ---------------------------------------------------------------------------
# observation map
# ---------------------------------------------------------------------------


def observation_nodes(grid, node_columns, penetration_nodes):
    """Node indices averaged by the sensor: the top ``N_c`` nodes per column."""
    if penetration_nodes < 1 or penetration_nodes > grid.n_z:
        raise ValueError("penetration node count must lie in [1, n_z]")
    cols = np.asarray(node_columns, dtype=int)
    offsets = grid.n_z - 1 - np.arange(penetration_nodes)
    return cols[:, None] * grid.n_z + offsets[None, :]


def observe(state, params, grid, node_columns, penetration_nodes):
    """Sensor model: mean water content of the top nodes of each column."""
    nodes = observation_nodes(grid, node_columns, penetration_nodes)
    cols = np.asarray(node_columns, dtype=int)
    soils = params.params
    per_col = SoilHydraulics(
        theta_s=np.asarray(soils.theta_s)[cols, None],
        theta_r=np.asarray(soils.theta_r)[cols, None],
        k_s=np.asarray(soils.k_s)[cols, None],
        alpha=np.asarray(soils.alpha)[cols, None],
        n=np.asarray(soils.n)[cols, None],
        s_r=soils.s_r if np.ndim(soils.s_r) == 0 else np.asarray(soils.s_r)[cols, None],
    )
    theta = water_content(state.head[nodes], per_col)
    return np.atleast_2d(theta).mean(axis=1)


def observe_jacobian(state, params, grid, node_columns, penetration_nodes):
    """Dense d(observation)/d(head) and d(observation)/d(parameters).

    The parameter Jacobian is laid out over the full flattened parameter
    vector (kind-major per column); only the measured columns' own entries
    are nonzero because the sensor sees only their water content.
    """
    nodes = observation_nodes(grid, node_columns, penetration_nodes)
    cols = np.asarray(node_columns, dtype=int)
    n_y = cols.size
    node_pars = params.node_params(grid)
    dy_dx = np.zeros((n_y, grid.n_nodes))
    dy_dphi = np.zeros((n_y, params.n_params))
    n_kinds = len(PARAM_KINDS)
    for i in range(n_y):
        sub = nodes[i]
        der = hydraulic_derivatives(state.head[sub], _subset_params(node_pars, sub))
        dy_dx[i, sub] = der.dtheta_dh / penetration_nodes
        for ki, kind in enumerate(PARAM_KINDS):
            dy_dphi[i, cols[i] * n_kinds + ki] = der.dtheta[kind].mean()
    return dy_dx, dy_dphi


def _subset_params(node_pars, idx):
    return SoilHydraulics(
        theta_s=np.asarray(node_pars.theta_s)[idx],
        theta_r=np.asarray(node_pars.theta_r)[idx],
        k_s=np.asarray(node_pars.k_s)[idx],
        alpha=np.asarray(node_pars.alpha)[idx],
        n=np.asarray(node_pars.n)[idx],
        s_r=node_pars.s_r if np.ndim(node_pars.s_r) == 0 else np.asarray(node_pars.s_r)[idx],
    )


def water_volume(state, params, grid):
    """Total stored water (m3); drift of this diagnoses mass-balance quality."""
    nodes = params.node_params(grid)
    return float(np.sum(water_content(state.head, nodes) * grid.cell_volumes()))
