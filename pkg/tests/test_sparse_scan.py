"""Tests for the scan-based sparse grid construction."""

import numpy as np
import pytest

from sparsempm.errors import KeyRangeError
from sparsempm.sparse_scan import (
    build_block_map,
    build_scan_sparse_grid,
    candidate_domain,
    mark_active_blocks,
    parallel_exclusive_scan,
    stencil_node_bounds,
)


def brute_force_blocks(positions, h, block_size):
    """Set of active blocks straight from the definition: every block
    holding at least one of the 27 stencil nodes of some particle."""
    blocks = set()
    for x in np.asarray(positions, dtype=float):
        base = np.floor(x / h - 0.5).astype(int)
        for oi in range(3):
            for oj in range(3):
                for ok in range(3):
                    node = base + (oi, oj, ok)
                    blocks.add(tuple(int(c) // block_size for c in node))
    return blocks


class TestCandidateDomain:
    def test_single_particle_hand_value(self):
        b_lo, b_hi = candidate_domain(np.array([[0.26, 0.31, 0.40]]), 0.1, 4)
        assert tuple(b_lo) == (0, 0, 0)
        assert tuple(b_hi) == (1, 1, 1)

    def test_covers_brute_force_blocks(self):
        rng = np.random.default_rng(20)
        pos = rng.uniform(-2.0, 2.0, size=(300, 3))
        b_lo, b_hi = candidate_domain(pos, 0.07, 4)
        for block in brute_force_blocks(pos, 0.07, 4):
            assert np.all(np.asarray(block) >= b_lo), f"{block} below domain"
            assert np.all(np.asarray(block) <= b_hi), f"{block} above domain"

    def test_node_bounds_cover_bases(self):
        rng = np.random.default_rng(21)
        pos = rng.uniform(-1.0, 1.0, size=(64, 3))
        lo, hi = stencil_node_bounds(pos, 0.05)
        bases = np.floor(pos / 0.05 - 0.5).astype(np.int64)
        assert np.all(bases.min(axis=0) == lo)
        assert np.all(bases.max(axis=0) + 2 == hi)

    def test_empty_particles_rejected(self):
        with pytest.raises(ValueError):
            candidate_domain(np.empty((0, 3)), 0.1, 4)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            candidate_domain(np.array([[0.0, np.nan, 0.0]]), 0.1, 4)

    def test_far_away_particle_exceeds_key_range(self):
        with pytest.raises(KeyRangeError):
            candidate_domain(np.array([[1e9, 0.0, 0.0]]), 1e-3, 4)


class TestMarkActiveBlocks:
    def test_no_particles_marks_nothing(self):
        mask = mark_active_blocks(np.empty((0, 3)), 0.1, 4,
                                  (0, 0, 0), (2, 2, 2))
        assert mask.shape == (8,)
        assert not mask.any(), "empty particle set must leave the mask clear"

    def test_interior_particle_marks_one_block(self):
        # Stencil nodes 1..3 per axis all live in block (0, 0, 0).
        pos = np.array([[0.16, 0.16, 0.16]])
        mask = mark_active_blocks(pos, 0.1, 4, (0, 0, 0), (2, 2, 2))
        assert mask.sum() == 1
        assert mask[0] == 1

    def test_duplicates_are_idempotent(self):
        pos = np.array([[0.26, 0.31, 0.40]])
        many = np.repeat(pos, 50, axis=0)
        b_lo, b_hi = candidate_domain(pos, 0.1, 4)
        shape = b_hi - b_lo + 1
        once = mark_active_blocks(pos, 0.1, 4, b_lo, shape)
        repeated = mark_active_blocks(many, 0.1, 4, b_lo, shape)
        assert np.array_equal(once, repeated)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(22)
        pos = rng.uniform(-1.5, 1.5, size=(200, 3))
        b_lo, b_hi = candidate_domain(pos, 0.08, 4)
        shape = b_hi - b_lo + 1
        mask = mark_active_blocks(pos, 0.08, 4, b_lo, shape)
        marked = set()
        for flat in np.flatnonzero(mask):
            bi, rest = divmod(int(flat), int(shape[1] * shape[2]))
            bj, bk = divmod(rest, int(shape[2]))
            marked.add((bi + int(b_lo[0]), bj + int(b_lo[1]),
                        bk + int(b_lo[2])))
        assert marked == brute_force_blocks(pos, 0.08, 4)


class TestParallelExclusiveScan:
    def test_small_example(self):
        offsets, total = parallel_exclusive_scan(
            np.array([1, 0, 1, 1, 0, 1]), n_segments=2
        )
        assert offsets.tolist() == [0, 1, 1, 2, 3, 3]
        assert total == 4

    def test_all_zeros(self):
        offsets, total = parallel_exclusive_scan(np.zeros(17, dtype=np.int64))
        assert total == 0
        assert not offsets.any()

    def test_empty_input(self):
        offsets, total = parallel_exclusive_scan(np.empty(0, dtype=np.int64))
        assert offsets.size == 0
        assert total == 0

    @pytest.mark.parametrize("n_segments", [1, 2, 3, 8])
    def test_matches_serial_oracle(self, n_segments):
        rng = np.random.default_rng(23)
        values = rng.integers(0, 2, size=100000).astype(np.int64)
        expected = np.concatenate([[0], np.cumsum(values)[:-1]])
        offsets, total = parallel_exclusive_scan(values,
                                                 n_segments=n_segments)
        assert total == int(values.sum())
        assert np.array_equal(offsets, expected), (
            f"scan with {n_segments} segments diverged from the serial oracle"
        )

    def test_general_counts(self):
        values = np.array([3, 0, 7, 1, 0, 2], dtype=np.int64)
        offsets, total = parallel_exclusive_scan(values, n_segments=4)
        assert offsets.tolist() == [0, 3, 3, 10, 11, 11]
        assert total == 13


class TestBuildBlockMap:
    def test_ranks_follow_row_major_mask_order(self):
        mask = np.array([1, 0, 1, 1, 0, 1, 0, 0], dtype=np.uint8)
        grid = build_block_map(mask, (0, 0, 0), (2, 2, 2), block_size=4)
        assert grid.phi_flat.tolist() == [0, -1, 1, 2, -1, 3, -1, -1]
        assert grid.n_blocks == 4

    def test_rank_round_trip(self):
        rng = np.random.default_rng(24)
        pos = rng.uniform(0.0, 1.0, size=(128, 3))
        grid = build_scan_sparse_grid(pos, 0.05, 4)
        for rank, block in enumerate(grid.active_blocks):
            assert grid.block_index(tuple(int(c) for c in block)) == rank


class TestBuildScanSparseGrid:
    def test_matches_brute_force_sets(self):
        rng = np.random.default_rng(25)
        for trial in range(10):
            pos = rng.uniform(-1.0, 1.0, size=(rng.integers(1, 200), 3))
            grid = build_scan_sparse_grid(pos, 0.06, 4)
            got = set(map(tuple, grid.active_blocks.tolist()))
            assert got == brute_force_blocks(pos, 0.06, 4), (
                f"trial {trial}: scan active set diverged from brute force"
            )

    def test_segment_count_invariance(self):
        rng = np.random.default_rng(26)
        pos = rng.uniform(-0.8, 0.8, size=(500, 3))
        reference = build_scan_sparse_grid(pos, 0.04, 4, n_segments=1)
        for n_segments in (2, 3, 5, 8):
            grid = build_scan_sparse_grid(pos, 0.04, 4,
                                          n_segments=n_segments)
            assert np.array_equal(grid.phi_flat, reference.phi_flat)
            assert np.array_equal(grid.active_blocks,
                                  reference.active_blocks)

    def test_active_set_grows_monotonically(self):
        rng = np.random.default_rng(27)
        pos = rng.uniform(0.0, 0.5, size=(40, 3))
        grid_small = build_scan_sparse_grid(pos[:20], 0.05, 4)
        grid_full = build_scan_sparse_grid(pos, 0.05, 4)
        small = set(map(tuple, grid_small.active_blocks.tolist()))
        full = set(map(tuple, grid_full.active_blocks.tolist()))
        assert small <= full, "adding particles must never drop blocks"

    def test_empty_particles_rejected(self):
        with pytest.raises(ValueError):
            build_scan_sparse_grid(np.empty((0, 3)), 0.05, 4)

    def test_single_particle_block_count(self):
        # A mid-block particle activates exactly one block; one near a
        # block corner activates up to eight.
        grid = build_scan_sparse_grid(np.array([[0.16, 0.16, 0.16]]), 0.1, 4)
        assert grid.n_blocks == 1
        grid = build_scan_sparse_grid(np.array([[0.4, 0.4, 0.4]]), 0.1, 4)
        assert 1 <= grid.n_blocks <= 8
