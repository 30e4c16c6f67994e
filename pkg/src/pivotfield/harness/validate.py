"""Estimation metrics and the two cross-validation modes."""

import numpy as np

from ..errors import DegenerateRange
from ..field_model import FieldState, ParameterField, observe, step_implicit


def rmse(estimate, truth):
    """Root mean square error over one vector pair."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean((est - tru) ** 2)))


def rmse_series(estimates, truths):
    """Per-step RMSE trajectory and its time average."""
    series = np.array([rmse(e, t) for e, t in zip(estimates, truths)])
    return series, float(series.mean())


def nrmse(predicted, actual):
    """RMSE normalized by the observed value range of the validation set."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.size == 0:
        raise DegenerateRange("empty validation set")
    span = float(actual.max() - actual.min())
    if span <= 0:
        raise DegenerateRange("validation values have zero range")
    return rmse(predicted, actual) / span


def split_batches(batches, fraction, rng):
    """Uniform random per-batch column split into (training, held-out).

    Each batch keeps at least one training column; batches too small to
    donate a held-out column go entirely to training.
    """
    if not 0 <= fraction < 1:
        raise ValueError("hold-out fraction must lie in [0, 1)")
    train, held = [], []
    for batch in batches:
        n = batch.n_y
        n_held = int(round(fraction * n))
        if n_held == 0 or n - n_held < 1:
            train.append(batch)
            continue
        held_pos = np.sort(rng.choice(n, size=n_held, replace=False))
        keep_pos = np.setdiff1d(np.arange(n), held_pos)
        train.append(batch.__class__(batch.time_index, batch.node_columns[keep_pos], batch.penetration_nodes, batch.values[keep_pos]))
        held.append(batch.__class__(batch.time_index, batch.node_columns[held_pos], batch.penetration_nodes, batch.values[held_pos]))
    return train, held


def holdout_nrmse(pairs):
    """NRMSE over accumulated (predicted, actual) pairs."""
    if not pairs:
        raise DegenerateRange("no held-out comparisons were collected")
    predicted = np.concatenate([np.atleast_1d(p) for p, _ in pairs])
    actual = np.concatenate([np.atleast_1d(a) for _, a in pairs])
    return nrmse(predicted, actual)


def open_loop_prediction_nrmse(state, params, grid, forcing_for, dt, start_step, batches, opts):
    """Held-out-day cross-validation: freeze the converged parameters, run the
    model open loop from the last assimilated state, and score the day's
    measurements against pure predictions.
    """
    if not batches:
        raise DegenerateRange("held-out day has no measurements")
    state = FieldState(np.asarray(state, dtype=float).copy())
    by_time = {}
    for b in batches:
        by_time.setdefault(int(b.time_index), []).append(b)
    last = max(by_time)
    preds, actuals = [], []
    for k in range(start_step, last + 1):
        state = step_implicit(state, params, forcing_for(k - 1), grid, dt, opts=opts)
        for batch in by_time.get(k, []):
            preds.append(observe(state, params, grid, batch.node_columns, batch.penetration_nodes))
            actuals.append(batch.values)
    return nrmse(np.concatenate(preds), np.concatenate(actuals))
