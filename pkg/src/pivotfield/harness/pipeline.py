"""Offline sensitivity/selection pipeline and file exports for the CLI."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from ..field_model import FieldState, MeasurementBatch, observe, param_label
from ..pivot import measured_nodes
from ..selection import assemble_estimable, orthogonal_projection_select
from ..sensitivity import (
    SectorSensitivity,
    SensitivityState,
    accumulate,
    output_sensitivity,
    propagate_sensitivity,
    rank_analysis,
    scale,
)
from .config import build_parameter_field
from .twin import rng_streams
from .weather import ForcingBuilder


@dataclass
class SectorAnalysis:
    store: SectorSensitivity
    rank: int
    gap_decades: float
    singular_values: np.ndarray


def run_sensitivity_analysis(cfg, rotations=None, warmup_rotations=0):
    """Propagate forward sensitivities against the nominal field and group
    scaled output sensitivity rows per azimuthal sector over pivot rotations.

    Returns ``{sector: SectorAnalysis}``.  The analysis runs offline on the
    nominal parameter field; rotations beyond the configured count are simply
    not accumulated.
    """
    rotations = rotations if rotations is not None else cfg.sensitivity_rotations
    rngs = rng_streams(cfg.seed)
    grid = cfg.grid()
    schedule = cfg.schedule()
    field = build_parameter_field(cfg.nominal_soil, grid, cfg.s_r, rngs["truth_field"])
    fb = ForcingBuilder(grid, schedule, cfg.weather, cfg.crop, cfg.evaporation_fraction)
    n_c = cfg.penetration(grid)
    phi = field.to_vector()

    rotation_steps = int(round(grid.theta_span_rad / schedule.angular_speed / cfg.dt_s))
    warmup_steps = warmup_rotations * rotation_steps
    total_steps = warmup_steps + rotations * rotation_steps

    state = FieldState(rngs["initial_head"].uniform(cfg.head_low, cfg.head_high, grid.n_nodes))
    sens = SensitivityState.zeros(grid)
    stores = {}
    from ..pivot import pivot_position

    for k in range(1, total_steps + 1):
        forcing = fb.forcing_at((k - 1) * cfg.dt_s)
        state, sens = propagate_sensitivity(state, sens, field, forcing, grid, cfg.dt_s, opts=cfg.solver)
        if k <= warmup_steps:
            continue
        t_k = k * cfg.dt_s
        _, active = pivot_position(t_k, schedule, grid.theta_span_rad)
        if not active:
            continue
        cols = measured_nodes(t_k, schedule, grid, cfg.offset_sectors)
        if cols is None:
            continue
        sector = int(cols[0] % grid.n_theta)
        y = observe(state, field, grid, cols, n_c)
        s_y = output_sensitivity(sens, state, field, grid, cols, n_c)
        s_tilde = scale(s_y, phi[sens.param_indices], y)
        store = stores.setdefault(sector, SectorSensitivity(sector, cols, sens.param_indices))
        accumulate(store, MeasurementBatch(k, cols, n_c, np.clip(y, 0.0, 1.0)), s_tilde)

    out = {}
    for sector, store in sorted(stores.items()):
        res = rank_analysis(store, gap_decades=cfg.gap_decades)
        out[sector] = SectorAnalysis(store=store, rank=res.rank, gap_decades=res.gap_decades, singular_values=res.singular_values)
    return out


def select_estimable(analyses, n_params_total):
    """Orthogonal-projection selection per sector, assembled into one set."""
    per_sector = {}
    for sector, analysis in sorted(analyses.items()):
        sel = orthogonal_projection_select(analysis.store.rows, analysis.rank)
        per_sector[sector] = [int(analysis.store.param_indices[i]) for i in sel.indices]
    return assemble_estimable(per_sector, n_params_total)


def export_spectra_csv(analyses, path):
    """Singular-value spectra of every sector as delimited text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sector", "index", "singular_value", "rank", "gap_decades"])
        for sector, analysis in sorted(analyses.items()):
            for i, sigma in enumerate(analysis.singular_values):
                writer.writerow([sector, i + 1, repr(float(sigma)), analysis.rank, repr(float(analysis.gap_decades))])


def export_sector_matrix_csv(analysis, path):
    """One accumulated scaled sensitivity matrix as delimited text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_index"] + [f"param_{int(i)}" for i in analysis.store.param_indices])
        for t, row in zip(analysis.store.row_times, analysis.store.rows):
            writer.writerow([t] + [repr(float(v)) for v in row])


def export_parameter_field_csv(field, grid, path):
    """Estimated/interpolated parameter field per surface column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", "i_r", "i_theta", "k_s", "theta_s", "theta_r", "alpha", "n"])
        for col in range(grid.n_columns):
            i_r, i_theta = divmod(col, grid.n_theta)
            writer.writerow(
                [col, i_r, i_theta]
                + [repr(float(np.asarray(field.params.kind(k))[col])) for k in ("k_s", "theta_s", "theta_r", "alpha", "n")]
            )


def export_measurements_csv(batches, grid, cfg, path):
    """Synthetic measurements in the ingestion format (timestamp,r,theta,vwc)."""
    from datetime import timedelta

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "r", "theta", "vwc"])
        for batch in batches:
            stamp = (cfg.start + timedelta(seconds=batch.time_index * cfg.dt_s)).isoformat()
            for col, value in zip(batch.node_columns, batch.values):
                i_r, i_theta = divmod(int(col), grid.n_theta)
                r = grid.r_coords[i_r]
                theta = (i_theta + 0.5) * grid.dtheta
                writer.writerow([stamp, repr(float(r)), repr(float(theta)), repr(float(value))])


def export_estimates_csv(result, path, head_stride=1):
    """Per-step belief trajectory: head estimates (optionally strided) and
    the natural-unit parameter estimates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_heads = len(result.head_estimates[0]) if result.head_estimates else 0
        head_cols = list(range(0, n_heads, head_stride))
        n_params = len(result.param_estimates[0]) if result.param_estimates else 0
        writer.writerow(
            ["step"] + [f"head_{i}" for i in head_cols] + [f"param_{j}" for j in range(n_params)]
        )
        for k, head, params in zip(result.times, result.head_estimates, result.param_estimates):
            writer.writerow(
                [k] + [repr(float(head[i])) for i in head_cols] + [repr(float(v)) for v in params]
            )


def export_metrics_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
