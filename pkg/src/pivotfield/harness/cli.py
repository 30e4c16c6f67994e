"""Command-line interface.

Subcommands cover the full workflow: ``simulate`` synthesizes a truth run
and measurement files, ``sensitivity`` exports per-sector scaled sensitivity
matrices and singular-value spectra, ``select`` writes the estimable-set
file, ``assimilate`` runs the filter on measurement files, ``validate`` runs
both cross-validation modes, and ``report`` collects metrics into tables.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 data
error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, NonConvergence, PivotFieldError
from .config import load_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DATA = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="pivotfield", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("simulate", help="truth simulation + synthetic measurement files")
    common(p)

    p = sub.add_parser("sensitivity", help="sector sensitivity matrices and spectra")
    common(p)
    p.add_argument("--rotations", type=int, default=None, help="pivot rotations to accumulate")

    p = sub.add_parser("select", help="estimable-parameter selection file")
    common(p)
    p.add_argument("--rotations", type=int, default=None)

    p = sub.add_parser("assimilate", help="run the filter on measurement files")
    common(p)
    p.add_argument("--case", type=int, choices=(1, 2, 3), default=None, help="estimation case")
    p.add_argument("--measurements", default=None, help="measurement CSV (default: twin-generated)")
    p.add_argument("--estimable", default=None, help="estimable-set JSON from `select`")

    p = sub.add_parser("validate", help="cross-validation of parameterization strategies")
    common(p)
    p.add_argument("--mode", choices=("per-step-split", "held-out-day", "both"), default="both")

    p = sub.add_parser("report", help="gather metrics.json files into tables")
    p.add_argument("--out", default=".", help="directory containing metrics.json")
    return parser


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    from .pipeline import export_measurements_csv, export_metrics_json, export_parameter_field_csv
    from .twin import rng_streams, simulate_truth

    cfg = load_config(args.config, seed_override=args.seed)
    out = _outdir(args)
    truth = simulate_truth(cfg, rng_streams(cfg.seed))
    export_measurements_csv(truth.batches, truth.grid, cfg, out / "measurements.csv")
    export_parameter_field_csv(truth.truth_field, truth.grid, out / "truth_params.csv")
    with open(out / "truth_heads_final.csv", "w") as fh:
        fh.write("node,head_m\n")
        for i, h in enumerate(truth.head_history[-1]):
            fh.write(f"{i},{h!r}\n")
    export_metrics_json(
        {
            "seed": cfg.seed,
            "n_steps": truth.n_steps,
            "n_batches": len(truth.batches),
            "n_nodes": truth.grid.n_nodes,
        },
        out / "run_meta.json",
    )
    print(f"simulate: {len(truth.batches)} batches over {truth.n_steps} steps -> {out}")
    return EXIT_OK


def cmd_sensitivity(args):
    from .pipeline import export_sector_matrix_csv, export_spectra_csv, run_sensitivity_analysis

    cfg = load_config(args.config, seed_override=args.seed)
    out = _outdir(args)
    analyses = run_sensitivity_analysis(cfg, rotations=args.rotations)
    export_spectra_csv(analyses, out / "spectra.csv")
    for sector, analysis in sorted(analyses.items()):
        export_sector_matrix_csv(analysis, out / f"sector_{sector:03d}_matrix.csv")
    for sector, analysis in sorted(analyses.items()):
        print(f"sensitivity: sector {sector} rows={analysis.store.n_rows} rank={analysis.rank} gap={analysis.gap_decades:.2f} decades")
    return EXIT_OK


def cmd_select(args):
    from .pipeline import run_sensitivity_analysis, select_estimable

    cfg = load_config(args.config, seed_override=args.seed)
    out = _outdir(args)
    analyses = run_sensitivity_analysis(cfg, rotations=args.rotations)
    grid = cfg.grid()
    estimable = select_estimable(analyses, grid.n_columns * 5)
    estimable.to_json(out / "estimable.json", grid=grid)
    print(f"select: {estimable.n_estimable} of {estimable.n_params_total} parameters estimable -> {out / 'estimable.json'}")
    return EXIT_OK


def cmd_assimilate(args):
    from ..assimilation import RichardsEKF, active_positions_for_batch, run_assimilation
    from ..field_model import FieldState
    from ..pivot import load_observations_csv, preprocess
    from ..selection import EstimableSet
    from .config import build_parameter_field
    from .pipeline import export_estimates_csv, export_metrics_json, export_parameter_field_csv
    from .twin import estimable_indices_for_case, rng_streams, run_case, run_twin_experiment, simulate_truth
    from .validate import rmse

    cfg = load_config(args.config, seed_override=args.seed, case_override=args.case)
    out = _outdir(args)
    rngs = rng_streams(cfg.seed)
    grid = cfg.grid()

    if args.measurements is None:
        # twin mode: truth is generated, estimator is scored against it
        report = run_twin_experiment(cfg, cases=(cfg.case,))
        metrics = report.cases[cfg.case]
        payload = {
            "mode": "twin",
            "case": cfg.case,
            "rmse_x": metrics.rmse_x,
            "rmse_phi": None if np.isnan(metrics.rmse_phi) else metrics.rmse_phi,
            "rmse_xa": metrics.rmse_xa,
            "rmse_x_series": [float(v) for v in metrics.rmse_x_series],
        }
        export_metrics_json(payload, out / "metrics.json")
        with open(out / "estimates.csv", "w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(["step", "rmse_x"])
            for k, v in enumerate(metrics.rmse_x_series, start=1):
                writer.writerow([k, repr(float(v))])
        print(f"assimilate (twin, case {cfg.case}): rmse_x={metrics.rmse_x:.5f} -> {out}")
        return EXIT_OK

    raw = load_observations_csv(args.measurements)
    field = build_parameter_field(cfg.nominal_soil, grid, cfg.s_r, rngs["nominal_field"])
    batches, prep = preprocess(raw, grid, field.params, cfg.t_s, penetration_nodes=cfg.penetration(grid), start_time=None)
    # measurement bucket cadence defines the filter step in data-driven runs
    dt = cfg.t_s
    n_steps = max(int(b.time_index) for b in batches) + 1
    batches = [b.__class__(b.time_index + 1, b.node_columns, b.penetration_nodes, b.values) for b in batches]

    if args.estimable:
        est = EstimableSet.from_json(args.estimable)
        indices = est.estimable
    else:
        indices = estimable_indices_for_case(cfg.case, grid)
    state0 = FieldState(np.full(grid.n_nodes, 0.5 * (cfg.head_low + cfg.head_high)))
    ekf = RichardsEKF(
        grid, field, indices, cfg.noise_spec, state0,
        opts=cfg.solver, gate_confidence=cfg.gate_confidence,
        kriging_enabled=(cfg.case == 3), kriging_min_samples=cfg.kriging_min_samples,
    )
    from .weather import ForcingBuilder

    fb = ForcingBuilder(grid, cfg.schedule(), cfg.weather, cfg.crop, cfg.evaporation_fraction)
    active_for = (lambda b: active_positions_for_batch(ekf.coding, b)) if cfg.case == 3 else None
    result = run_assimilation(ekf, batches, lambda k: fb.forcing_at(k * dt), dt, n_steps, active_for_batch=active_for)
    export_estimates_csv(result, out / "estimates.csv", head_stride=max(1, grid.n_nodes // 512))
    export_parameter_field_csv(ekf.current_field(), grid, out / "estimated_params.csv")
    export_metrics_json(
        {
            "mode": "measurements",
            "case": cfg.case,
            "n_batches": len(batches),
            "dropped_outliers": prep.n_outliers_dropped,
            "outside_region": prep.n_outside_region,
            "innovation_mean_normalized_sq": float(np.mean([v for _, v, _ in result.innovations])) if result.innovations else None,
            "failures": result.failures,
        },
        out / "metrics.json",
    )
    print(f"assimilate: {len(batches)} batches, {len(result.failures)} failed steps -> {out}")
    return EXIT_OK


def cmd_validate(args):
    from .pipeline import export_metrics_json
    from .twin import run_validation_comparison

    cfg = load_config(args.config, seed_override=args.seed)
    out = _outdir(args)
    modes = ("per-step-split", "held-out-day") if args.mode == "both" else (args.mode,)
    payload = {"seed": cfg.seed}
    for mode in modes:
        scores = run_validation_comparison(cfg, mode=mode)
        payload[mode] = {k: float(v) for k, v in scores.items()}
        ranking = " < ".join(sorted(scores, key=scores.get))
        print(f"validate [{mode}]: " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(scores.items())) + f"  ({ranking})")
    export_metrics_json(payload, out / "validation.json")
    return EXIT_OK


def cmd_report(args):
    out = Path(args.out)
    rows = []
    for path in sorted(out.rglob("metrics.json")) + sorted(out.rglob("validation.json")):
        with open(path) as fh:
            rows.append((str(path.relative_to(out)), json.load(fh)))
    if not rows:
        raise DataError(f"no metrics.json/validation.json found under {out}")
    report_path = out / "report.csv"
    with open(report_path, "w") as fh:
        fh.write("source,key,value\n")
        for name, payload in rows:
            for key, value in sorted(payload.items()):
                if isinstance(value, (int, float, str)) or value is None:
                    fh.write(f"{name},{key},{value}\n")
                elif isinstance(value, dict):
                    for k2, v2 in sorted(value.items()):
                        fh.write(f"{name},{key}.{k2},{v2}\n")
    for name, payload in rows:
        print(f"{name}: " + ", ".join(f"{k}={v}" for k, v in sorted(payload.items()) if isinstance(v, (int, float))))
    print(f"report -> {report_path}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sensitivity": cmd_sensitivity,
    "select": cmd_select,
    "assimilate": cmd_assimilate,
    "validate": cmd_validate,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence,) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except PivotFieldError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
