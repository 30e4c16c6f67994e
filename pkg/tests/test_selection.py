import numpy as np
import pytest

from pivotfield.selection import EstimableSet, assemble_estimable, orthogonal_projection_select

from oracles import greedy_projection_reference


class TestOrthogonalProjection:
    def test_identity_selects_all_lowest_index_first(self):
        res = orthogonal_projection_select(np.eye(4), rank_target=4)
        assert res.indices == [0, 1, 2, 3]
        assert not res.stopped_by_cutoff

    def test_duplicate_direction_never_selected(self):
        # columns: c, 2c, d with d orthogonal to c
        mat = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        res = orthogonal_projection_select(mat, rank_target=2)
        assert res.indices == [1, 2]

    def test_matches_bruteforce_oracle_on_random_matrices(self, rng):
        for trial in range(30):
            rows = rng.integers(3, 13)
            cols = rng.integers(2, 21)
            rank = rng.integers(1, min(rows, cols) + 1)
            mat = rng.normal(size=(rows, rank)) @ rng.normal(size=(rank, cols))
            target = int(min(rank, rows, cols))
            got = orthogonal_projection_select(mat, target)
            want = greedy_projection_reference(mat, target)
            assert got.indices == want, f"trial {trial}"

    def test_residual_norms_non_increasing(self, rng):
        mat = rng.normal(size=(10, 15))
        res = orthogonal_projection_select(mat, rank_target=8)
        assert all(a >= b - 1e-12 for a, b in zip(res.residual_norms, res.residual_norms[1:]))

    def test_cutoff_stop_reports_rank_deficiency(self, rng):
        base = rng.normal(size=(6, 2))
        mat = base @ rng.normal(size=(2, 9))  # true rank 2
        res = orthogonal_projection_select(mat, rank_target=5)
        assert res.stopped_by_cutoff
        assert len(res.indices) == 2

    def test_column_permutation_equivariance(self, rng):
        mat = rng.normal(size=(7, 10)) * rng.uniform(0.5, 3.0, size=10)[None, :]
        perm = rng.permutation(10)
        base = orthogonal_projection_select(mat, 5).indices
        permuted = orthogonal_projection_select(mat[:, perm], 5).indices
        assert [int(perm[i]) for i in permuted] == base

    def test_gram_matrix_stays_invertible(self, rng):
        mat = rng.normal(size=(12, 12))
        res = orthogonal_projection_select(mat, rank_target=10)
        assert all(np.isfinite(c) for c in res.gram_conditions)

    def test_rank_target_validation(self):
        with pytest.raises(ValueError):
            orthogonal_projection_select(np.eye(3), rank_target=4)


class TestEstimableSet:
    def test_five_params_per_measured_node(self):
        sel = {0: list(range(0, 15))}  # say 3 nodes x 5 params
        est = assemble_estimable(sel, n_params_total=40)
        assert est.n_estimable == 15

    def test_zero_sectors_everything_nonestimable(self):
        est = assemble_estimable({}, n_params_total=12)
        assert est.n_estimable == 0
        assert est.nonestimable.tolist() == list(range(12))

    def test_overlapping_sectors_deduplicated(self):
        est = assemble_estimable({0: [3, 4, 5], 1: [5, 6]}, n_params_total=10)
        assert est.estimable.tolist() == [3, 4, 5, 6]
        assert est.nonestimable.tolist() == [0, 1, 2, 7, 8, 9]

    def test_union_and_complement_partition(self):
        est = assemble_estimable({0: [1, 2], 2: [7]}, n_params_total=9)
        together = np.concatenate([est.estimable, est.nonestimable])
        assert sorted(together.tolist()) == list(range(9))

    def test_duplicate_within_sector_rejected(self):
        with pytest.raises(ValueError):
            assemble_estimable({0: [1, 1]}, n_params_total=5)

    def test_sector_masks(self):
        est = assemble_estimable({0: [4, 2], 1: [9]}, n_params_total=12)
        mask0 = est.mask_for_sector(0)
        assert mask0.tolist() == [True, True, False]  # estimable order [2, 4, 9]
        assert est.mask_for_sector(1).tolist() == [False, False, True]
        assert est.mask_for_sector(5).tolist() == [False, False, False]

    def test_json_roundtrip(self, tmp_path):
        est = assemble_estimable({0: [4, 2], 3: [9, 0]}, n_params_total=12)
        path = tmp_path / "estimable.json"
        est.to_json(path)
        back = EstimableSet.from_json(path)
        assert back.per_sector == {0: [4, 2], 3: [9, 0]}
        assert np.array_equal(back.estimable, est.estimable)
