"""Tests for the lock-free hash-based sparse grid construction."""

import numpy as np
import pytest
from numba import get_num_threads, set_num_threads

from sparsempm.errors import KeyRangeError
from sparsempm.grid_index import EMPTY_KEY, mix64, pack_key
from sparsempm.sparse_hash import (
    BlockHashTable,
    _insert_many,
    build_hash_sparse_grid,
    initial_slot,
)
from sparsempm.sparse_scan import build_scan_sparse_grid

from test_sparse_scan import brute_force_blocks


class TestInitialSlot:
    def test_single_slot_table(self):
        assert initial_slot(pack_key((3, 1, 2)), 1) == 0

    def test_masks_mixed_hash(self):
        for block in [(0, 0, 0), (5, -3, 2), (-100, 40, 7)]:
            key = pack_key(block)
            for size in (2, 8, 64, 1024):
                assert initial_slot(key, size) == mix64(key) % size

    @pytest.mark.parametrize("bad", [0, 3, 12, -8])
    def test_rejects_non_power_of_two(self, bad):
        with pytest.raises(ValueError):
            initial_slot(1, bad)


def _find_colliding_blocks(size):
    """Two distinct blocks whose keys share a home slot in a table of
    the given size."""
    seen = {}
    for bi in range(-20, 20):
        for bj in range(-20, 20):
            block = (bi, bj, 0)
            slot = initial_slot(pack_key(block), size)
            if slot in seen and seen[slot] != block:
                return seen[slot], block
            seen[slot] = block
    raise AssertionError("no collision found in search window")


class TestInsertAndLookup:
    def test_first_insert_wins_rank_zero(self):
        table = BlockHashTable(16)
        assert table.insert((2, 3, 4)) == (0, True)
        assert table.insert((2, 3, 4)) == (0, False)
        assert table.count == 1

    def test_lookup_roundtrip_and_miss(self):
        table = BlockHashTable(64)
        blocks = [(0, 0, 0), (1, 0, 0), (-5, 7, 2), (9, 9, 9)]
        for expected_rank, block in enumerate(blocks):
            rank, fresh = table.insert(block)
            assert (rank, fresh) == (expected_rank, True)
        for expected_rank, block in enumerate(blocks):
            assert table.lookup(block) == expected_rank
        assert table.lookup((123, 456, -789)) == -1

    def test_collision_probes_next_slot(self):
        size = 8
        first, second = _find_colliding_blocks(size)
        home = initial_slot(pack_key(first), size)
        table = BlockHashTable(size)
        table.insert(first)
        table.insert(second)
        assert table.keys[home] == pack_key(first)
        assert table.keys[(home + 1) % size] == pack_key(second), (
            "linear probing should place the loser one slot along"
        )

    def test_matches_dict_oracle(self):
        rng = np.random.default_rng(30)
        blocks = [tuple(int(c) for c in row)
                  for row in rng.integers(-40, 40, size=(5000, 3))]
        table = BlockHashTable(16384)
        oracle = {}
        for block in blocks:
            rank, fresh = table.insert(block)
            if block not in oracle:
                assert fresh, f"first insert of {block} reported duplicate"
                oracle[block] = rank
            else:
                assert not fresh
            assert rank == oracle[block]
        assert table.count == len(oracle)
        for block, rank in oracle.items():
            assert table.lookup(block) == rank

    def test_overflow_sets_flag(self):
        table = BlockHashTable(2)
        assert table.insert((0, 0, 0))[1] is True
        assert table.insert((1, 0, 0))[1] is True
        rank, fresh = table.insert((2, 0, 0))
        assert (rank, fresh) == (-1, False)
        assert table.overflowed

    def test_empty_sentinel_never_collides_with_keys(self):
        assert pack_key((0, 0, 0)) != EMPTY_KEY
        table = BlockHashTable(4)
        assert np.all(table.keys == np.uint64(EMPTY_KEY))


class TestBuildHashSparseGrid:
    def test_matches_scan_and_brute_force(self):
        rng = np.random.default_rng(31)
        for trial in range(10):
            pos = rng.uniform(-1.2, 1.2, size=(rng.integers(1, 300), 3))
            hash_grid = build_hash_sparse_grid(pos, 0.06, 4)
            scan_grid = build_scan_sparse_grid(pos, 0.06, 4)
            hash_set = set(map(tuple, hash_grid.active_blocks.tolist()))
            scan_set = set(map(tuple, scan_grid.active_blocks.tolist()))
            assert hash_set == scan_set, f"trial {trial}: backends disagree"
            assert hash_set == brute_force_blocks(pos, 0.06, 4)

    def test_deterministic_build_first_encounter_order(self):
        rng = np.random.default_rng(32)
        pos = rng.uniform(-0.5, 0.5, size=(100, 3))
        grid = build_hash_sparse_grid(pos, 0.05, 4, deterministic=True)
        expected = []
        seen = set()
        for x in pos:
            base = np.floor(x / 0.05 - 0.5).astype(int)
            ranges = [(int(b) // 4, int(b + 2) // 4) for b in base]
            for bi in range(ranges[0][0], ranges[0][1] + 1):
                for bj in range(ranges[1][0], ranges[1][1] + 1):
                    for bk in range(ranges[2][0], ranges[2][1] + 1):
                        block = (bi, bj, bk)
                        if block not in seen:
                            seen.add(block)
                            expected.append(block)
        assert [tuple(int(c) for c in b) for b in grid.active_blocks] \
            == expected

    def test_forced_overflow_rebuilds_and_succeeds(self):
        rng = np.random.default_rng(33)
        pos = rng.uniform(-1.0, 1.0, size=(200, 3))
        grid = build_hash_sparse_grid(pos, 0.05, 4, initial_capacity=2)
        assert set(map(tuple, grid.active_blocks.tolist())) \
            == brute_force_blocks(pos, 0.05, 4)

    def test_final_table_respects_load_factor(self):
        rng = np.random.default_rng(34)
        pos = rng.uniform(-1.0, 1.0, size=(400, 3))
        grid = build_hash_sparse_grid(pos, 0.05, 4)
        assert grid.n_blocks <= grid.keys.shape[0] // 2

    def test_empty_particles_rejected(self):
        with pytest.raises(ValueError):
            build_hash_sparse_grid(np.empty((0, 3)), 0.05, 4)

    def test_out_of_range_particle_rejected(self):
        with pytest.raises(KeyRangeError):
            build_hash_sparse_grid(np.array([[1e9, 0.0, 0.0]]), 1e-3, 4)


class TestConcurrentInserts:
    @pytest.mark.parametrize("n_threads", [1, 2, 4, 8])
    def test_unique_winner_per_key(self, n_threads):
        rng = np.random.default_rng(40 + n_threads)
        distinct = rng.integers(-200, 200, size=(500, 3))
        distinct = np.unique(distinct, axis=0)
        keys = np.array([pack_key(tuple(int(c) for c in b))
                         for b in distinct], dtype=np.uint64)
        # Every key appears several times so threads race on duplicates.
        stream = np.repeat(keys, 4)
        rng.shuffle(stream)
        table = BlockHashTable(4096)
        ranks = np.empty(stream.shape[0], dtype=np.int64)
        fresh = np.zeros(stream.shape[0], dtype=np.int64)
        old = get_num_threads()
        try:
            set_num_threads(n_threads)
            _insert_many(table.keys, table.vals, table._counter,
                         table._overflow, stream, ranks, fresh)
        finally:
            set_num_threads(old)
        assert not table.overflowed
        assert table.count == keys.size
        assert fresh.sum() == keys.size, (
            f"{fresh.sum()} insert winners for {keys.size} distinct keys"
        )
        by_key = {}
        for key, rank in zip(stream, ranks):
            assert rank >= 0
            by_key.setdefault(int(key), set()).add(int(rank))
        assert all(len(r) == 1 for r in by_key.values()), (
            "a key was handed more than one rank"
        )
        all_ranks = {r for s in by_key.values() for r in s}
        assert all_ranks == set(range(keys.size))
