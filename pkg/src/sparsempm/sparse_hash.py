"""Hash-based sparse grid construction.

Active blocks are discovered by inserting packed block keys into an
open-addressing table with linear probing.  Slots are claimed lock-free
with compare-and-swap and block ranks are handed out by an atomic counter,
so the construction needs no candidate bounding box at all.  If the table
overflows (or ends up past half full) it is discarded and rebuilt at twice
the capacity.
"""

import numpy as np
from numba import njit, prange

from ._atomics import _cas_u64, _fetch_add_i64
from .errors import KeyRangeError
from .grid_index import (
    COORD_MAX,
    COORD_MIN,
    MODE_HASH,
    ActiveIndexMap,
    _mix64,
    _pack_key,
    mix64,
    pack_key,
)

_UEMPTY = np.uint64((1 << 64) - 1)
_U1 = np.uint64(1)


def initial_slot(key, table_size):
    """Home slot of a key: its mixed hash masked to the table size.

    ``table_size`` must be a power of two so the mask keeps every bit of
    the mixed hash uniform.
    """
    table_size = int(table_size)
    if table_size < 1 or table_size & (table_size - 1):
        raise ValueError(f"table size must be a power of two, got {table_size}")
    return mix64(key) & (table_size - 1)


@njit(cache=True, inline="always")
def _insert_key(keys, vals, counter, overflow, key):
    """Insert a packed key; returns (rank, newly_inserted) or (-1, False)
    with the overflow flag raised when probing exhausts the table."""
    n_slots = np.uint64(len(keys))
    mask = n_slots - _U1
    s = _mix64(key) & mask
    for _ in range(len(keys)):
        stored = keys[s]
        if stored == key:
            r = vals[np.int64(s)]
            while r < 0:
                # Owner has claimed the slot but not published the rank yet;
                # an atomic no-op add is a load the compiler cannot hoist.
                r = _fetch_add_i64(vals, np.int64(s), 0)
            return r, False
        if stored == _UEMPTY:
            prev = _cas_u64(keys, np.int64(s), _UEMPTY, key)
            if prev == _UEMPTY:
                rank = _fetch_add_i64(counter, 0, 1)
                # vals starts at -1; an atomic add publishes rank atomically.
                _fetch_add_i64(vals, np.int64(s), rank + 1)
                return rank, True
            if prev == key:
                r = vals[np.int64(s)]
                while r < 0:
                    r = _fetch_add_i64(vals, np.int64(s), 0)
                return r, False
        s = (s + _U1) & mask
    overflow[0] = 1
    return np.int64(-1), False


@njit(cache=True)
def _insert_one(keys, vals, counter, overflow, key):
    return _insert_key(keys, vals, counter, overflow, key)


@njit(cache=True, inline="always")
def _lookup_key(keys, vals, key):
    n_slots = np.uint64(len(keys))
    mask = n_slots - _U1
    s = _mix64(key) & mask
    for _ in range(len(keys)):
        stored = keys[s]
        if stored == key:
            return vals[np.int64(s)]
        if stored == _UEMPTY:
            return np.int64(-1)
        s = (s + _U1) & mask
    return np.int64(-1)


@njit(cache=True)
def _lookup_one(keys, vals, key):
    return _lookup_key(keys, vals, key)


@njit(parallel=True, cache=True)
def _insert_many(keys, vals, counter, overflow, packed, ranks, fresh):
    for i in prange(packed.shape[0]):
        r, new = _insert_key(keys, vals, counter, overflow, packed[i])
        ranks[i] = r
        fresh[i] = 1 if new else 0


class BlockHashTable:
    """Open-addressing block table: packed uint64 keys, int64 ranks.

    Empty slots hold the all-ones sentinel, which no valid packed key can
    equal.  ``count`` is the atomic rank counter, i.e. the number of
    distinct blocks inserted so far.
    """

    def __init__(self, capacity):
        capacity = int(capacity)
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(
                f"table capacity must be a power of two, got {capacity}"
            )
        self.keys = np.full(capacity, _UEMPTY, dtype=np.uint64)
        self.vals = np.full(capacity, -1, dtype=np.int64)
        self._counter = np.zeros(1, dtype=np.int64)
        self._overflow = np.zeros(1, dtype=np.int64)

    @property
    def capacity(self):
        return int(self.keys.shape[0])

    @property
    def count(self):
        return int(self._counter[0])

    @property
    def overflowed(self):
        return bool(self._overflow[0])

    def insert(self, block):
        """Insert a block; returns (rank, newly_inserted).

        On overflow the rank is -1 and the overflow flag stays raised; the
        caller is expected to rebuild at a larger capacity.
        """
        key = np.uint64(pack_key(block))
        rank, new = _insert_one(self.keys, self.vals, self._counter,
                                self._overflow, key)
        return int(rank), bool(new)

    def lookup(self, block):
        """Rank of a block, or -1 when absent."""
        key = np.uint64(pack_key(block))
        return int(_lookup_one(self.keys, self.vals, key))

    def active_blocks(self):
        """(count, 3) block coordinates ordered by rank."""
        occupied = np.flatnonzero(self.keys != _UEMPTY)
        ranks = self.vals[occupied]
        blocks = np.empty((self.count, 3), dtype=np.int64)
        keys = self.keys[occupied]
        mask = np.uint64((1 << 21) - 1)
        bias = np.int64(1 << 20)
        blocks[ranks, 2] = (keys & mask).astype(np.int64) - bias
        blocks[ranks, 1] = ((keys >> np.uint64(21)) & mask).astype(np.int64) - bias
        blocks[ranks, 0] = ((keys >> np.uint64(42)) & mask).astype(np.int64) - bias
        return blocks


@njit(parallel=True, cache=True)
def _insert_particle_blocks(xp, inv_h, block_size, keys, vals, counter,
                            overflow, err):
    for p in prange(xp.shape[0]):
        b0 = np.int64(np.floor(xp[p, 0] * inv_h - 0.5))
        b1 = np.int64(np.floor(xp[p, 1] * inv_h - 0.5))
        b2 = np.int64(np.floor(xp[p, 2] * inv_h - 0.5))
        ilo = b0 // block_size
        ihi = (b0 + 2) // block_size
        jlo = b1 // block_size
        jhi = (b1 + 2) // block_size
        klo = b2 // block_size
        khi = (b2 + 2) // block_size
        if (ilo < COORD_MIN or ihi > COORD_MAX or jlo < COORD_MIN
                or jhi > COORD_MAX or klo < COORD_MIN or khi > COORD_MAX):
            err[0] = 1
            continue
        for bi in range(ilo, ihi + 1):
            for bj in range(jlo, jhi + 1):
                for bk in range(klo, khi + 1):
                    _insert_key(keys, vals, counter, overflow,
                                _pack_key(bi, bj, bk))


@njit(cache=True)
def _insert_particle_blocks_serial(xp, inv_h, block_size, keys, vals, counter,
                                   overflow, err):
    for p in range(xp.shape[0]):
        b0 = np.int64(np.floor(xp[p, 0] * inv_h - 0.5))
        b1 = np.int64(np.floor(xp[p, 1] * inv_h - 0.5))
        b2 = np.int64(np.floor(xp[p, 2] * inv_h - 0.5))
        ilo = b0 // block_size
        ihi = (b0 + 2) // block_size
        jlo = b1 // block_size
        jhi = (b1 + 2) // block_size
        klo = b2 // block_size
        khi = (b2 + 2) // block_size
        if (ilo < COORD_MIN or ihi > COORD_MAX or jlo < COORD_MIN
                or jhi > COORD_MAX or klo < COORD_MIN or khi > COORD_MAX):
            err[0] = 1
            continue
        for bi in range(ilo, ihi + 1):
            for bj in range(jlo, jhi + 1):
                for bk in range(klo, khi + 1):
                    _insert_key(keys, vals, counter, overflow,
                                _pack_key(bi, bj, bk))


def _next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


def build_hash_sparse_grid(positions, h, block_size=4, initial_capacity=None,
                           deterministic=False, max_rebuilds=48):
    """Hash pipeline: insert every stencil block of every particle.

    Returns an ActiveIndexMap in hash mode.  Ranks are assignment order,
    which under the parallel build is nondeterministic; a deterministic
    (serial) build yields first-encounter order.  The table is rebuilt at
    double capacity until it neither overflows nor exceeds half load.
    """
    xp = np.ascontiguousarray(positions, dtype=np.float64)
    if xp.shape[0] == 0:
        raise ValueError("cannot build a grid from an empty particle set")
    if not np.all(np.isfinite(xp)):
        raise ValueError("particle positions must be finite")
    if initial_capacity is None:
        capacity = _next_pow2(max(64, xp.shape[0] // 4))
    else:
        capacity = int(initial_capacity)
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(
                f"table capacity must be a power of two, got {capacity}"
            )
    inv_h = 1.0 / float(h)
    kernel = (_insert_particle_blocks_serial if deterministic
              else _insert_particle_blocks)
    for _ in range(max_rebuilds):
        table = BlockHashTable(capacity)
        err = np.zeros(1, dtype=np.int64)
        kernel(xp, inv_h, block_size, table.keys, table.vals, table._counter,
               table._overflow, err)
        if err[0]:
            raise KeyRangeError(
                "particle stencil block outside packable coordinate range"
            )
        if not table.overflowed and table.count <= capacity // 2:
            return ActiveIndexMap(block_size, table.active_blocks(),
                                  MODE_HASH, keys=table.keys,
                                  vals=table.vals)
        capacity *= 2
    raise RuntimeError("hash table rebuild limit reached")
