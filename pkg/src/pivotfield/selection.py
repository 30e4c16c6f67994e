"""Greedy orthogonal-projection ranking of estimable parameters.

Columns of a scaled sector sensitivity matrix are picked one at a time: first
the largest-norm column, then repeatedly the column with the largest residual
after projecting the matrix onto the span of everything already selected.
The selection stops at the requested rank or when the largest residual column
drops below a cutoff (a rank-deficient stop, reported rather than raised).

Projections are computed through an incrementally re-orthogonalized basis of
the selected columns instead of the textbook normal-equations inverse; the
result is algebraically identical and much better conditioned.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .field_model import param_label

log = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    """Outcome of one orthogonal-projection pass over a sector matrix."""

    indices: list  # ordered as selected
    residual_norms: list  # max residual column norm seen before each pick
    stopped_by_cutoff: bool
    gram_conditions: list  # condition number of X^T X after each pick

    @property
    def rank_deficient_stop(self):
        return self.stopped_by_cutoff


def orthogonal_projection_select(s_tilde, rank_target, cutoff=None):
    """Rank the most estimable columns of a scaled sensitivity matrix.

    ``cutoff`` defaults to 1e-8 times the largest initial column norm.  Ties
    on equal norms break toward the lowest column index.
    """
    mat = np.asarray(s_tilde, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("sensitivity matrix must be finite")
    if rank_target < 0 or rank_target > min(mat.shape):
        raise ValueError("rank_target must lie within the matrix rank bound")

    norms0 = np.linalg.norm(mat, axis=0)
    if cutoff is None:
        cutoff = 1e-8 * (norms0.max() if norms0.size else 0.0)

    residual = mat.copy()
    basis = np.zeros((mat.shape[0], 0))
    selected, residual_trace, gram_conds = [], [], []
    stopped = False
    while len(selected) < rank_target:
        norms = np.linalg.norm(residual, axis=0)
        if selected:
            norms[selected] = -np.inf
        best = int(np.argmax(norms))
        residual_trace.append(float(norms[best]))
        if norms[best] < cutoff:
            stopped = True
            log.info("selection stopped by cutoff after %d of %d picks", len(selected), rank_target)
            break
        direction = residual[:, best].copy()
        # two Gram-Schmidt sweeps keep the basis orthonormal to roundoff
        for _ in range(2):
            direction -= basis @ (basis.T @ direction)
        direction /= np.linalg.norm(direction)
        basis = np.column_stack([basis, direction])
        residual = residual - np.outer(direction, direction @ residual)
        selected.append(best)
        picked = mat[:, selected]
        sv = np.linalg.svd(picked, compute_uv=False)
        gram_conds.append(float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else np.inf)
    if gram_conds:
        log.debug("selection gram condition numbers: %s", gram_conds)
    return SelectionResult(
        indices=selected,
        residual_norms=residual_trace,
        stopped_by_cutoff=stopped,
        gram_conditions=gram_conds,
    )


@dataclass
class EstimableSet:
    """Union of per-sector selections and its complement over all parameters."""

    per_sector: dict
    n_params_total: int
    estimable: np.ndarray = field(init=False)
    nonestimable: np.ndarray = field(init=False)

    def __post_init__(self):
        for sector, indices in self.per_sector.items():
            if len(set(indices)) != len(indices):
                raise ValueError(f"sector {sector} selection contains duplicates")
        union = sorted({i for indices in self.per_sector.values() for i in indices})
        self.estimable = np.array(union, dtype=int)
        mask = np.ones(self.n_params_total, dtype=bool)
        mask[self.estimable] = False
        self.nonestimable = np.nonzero(mask)[0]

    @property
    def n_estimable(self):
        return self.estimable.size

    def positions_for_sector(self, sector):
        """Positions inside the estimable vector of one sector's parameters."""
        lookup = {int(g): i for i, g in enumerate(self.estimable)}
        return np.array([lookup[int(i)] for i in self.per_sector.get(sector, [])], dtype=int)

    def mask_for_sector(self, sector):
        """Boolean activity mask over the estimable vector for one sector."""
        mask = np.zeros(self.n_estimable, dtype=bool)
        mask[self.positions_for_sector(sector)] = True
        return mask

    def to_json(self, path, grid=None):
        """Write a human-readable sector -> parameter index/name file."""
        payload = {
            "n_params_total": int(self.n_params_total),
            "n_estimable": int(self.n_estimable),
            "estimable": [int(i) for i in self.estimable],
            "sectors": {
                str(sector): {
                    "indices": [int(i) for i in indices],
                    "labels": [param_label(i, grid) for i in indices] if grid is not None else None,
                }
                for sector, indices in sorted(self.per_sector.items())
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        per_sector = {int(k): list(v["indices"]) for k, v in payload["sectors"].items()}
        return cls(per_sector=per_sector, n_params_total=int(payload["n_params_total"]))


def assemble_estimable(per_sector_selections, n_params_total):
    """Collect per-sector selections into the estimable/non-estimable split."""
    return EstimableSet(per_sector={int(k): list(v) for k, v in per_sector_selections.items()}, n_params_total=n_params_total)
