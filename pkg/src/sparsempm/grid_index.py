"""Active-node indexing shared by the dense and sparse grid backends.

Grid nodes are grouped into cubic blocks of ``block_size`` nodes per axis.
A backend enumerates the active blocks (rank ``phi_b``), and every node in
an active block gets the compact index ``phi_b * block_size**3 + local``.
Block coordinates pack into a single 64-bit key for hashing and equality.
"""

import numpy as np
from numba import njit

from .errors import InactiveNodeError, KeyRangeError

KEY_BITS = 21
KEY_BIAS = 1 << 20
COORD_MIN = -(1 << 20)
COORD_MAX = (1 << 20) - 1

# All-ones is never a packed key (bit 63 of a valid key is always clear).
EMPTY_KEY = (1 << 64) - 1

MODE_FLAT = 0
MODE_HASH = 1

_MASK64 = (1 << 64) - 1
_MIX_MUL1 = 0xBF58476D1CE4E5B9
_MIX_MUL2 = 0x94D049BB133111EB

_U21 = np.uint64(21)
_U27 = np.uint64(27)
_U30 = np.uint64(30)
_U31 = np.uint64(31)
_U42 = np.uint64(42)
_UMASK21 = np.uint64((1 << 21) - 1)
_UBIAS = np.uint64(1 << 20)
_UMUL1 = np.uint64(_MIX_MUL1)
_UMUL2 = np.uint64(_MIX_MUL2)
_UEMPTY = np.uint64(EMPTY_KEY)


def pack_key(block, bits=KEY_BITS, bias=KEY_BIAS):
    """Pack a block coordinate triple into one non-negative integer key.

    Each component is shifted by ``bias`` into [0, 2**bits) and the three
    fields are concatenated, highest axis first.  Raises KeyRangeError if
    any component falls outside [-bias, 2**bits - bias).
    """
    lo = -bias
    hi = (1 << bits) - bias
    packed = 0
    for c in block:
        c = int(c)
        if not lo <= c < hi:
            raise KeyRangeError(
                f"block coordinate {c} outside packable range [{lo}, {hi - 1}]"
            )
        packed = (packed << bits) | (c + bias)
    return packed


def unpack_key(key, bits=KEY_BITS, bias=KEY_BIAS):
    """Invert ``pack_key``: recover the (bi, bj, bk) block triple."""
    key = int(key)
    mask = (1 << bits) - 1
    bk = (key & mask) - bias
    bj = ((key >> bits) & mask) - bias
    bi = ((key >> (2 * bits)) & mask) - bias
    return (bi, bj, bk)


def mix64(key):
    """Bijective 64-bit finalizer used to spread packed keys over hash slots.

    Sequential keys differ only in low bits; this xor-shift/multiply chain
    avalanches them across the full word.  mix64(0) == 0 by construction.
    """
    z = int(key) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_MUL2) & _MASK64
    return z ^ (z >> 31)


def block_of(node, block_size=4):
    """Block coordinate containing a node; floor division, so negative
    node coordinates map to negative blocks without a seam at zero."""
    i, j, k = (int(c) for c in node)
    return (i // block_size, j // block_size, k // block_size)


def local_offset(node, block_size=4):
    """Row-major offset of a node within its block, in [0, block_size**3)."""
    i, j, k = (int(c) for c in node)
    b = block_size
    li = i - b * (i // b)
    lj = j - b * (j // b)
    lk = k - b * (k // b)
    return (li * b + lj) * b + lk


@njit(cache=True)
def _pack_key(bi, bj, bk):
    u = np.uint64(bi + KEY_BIAS)
    v = np.uint64(bj + KEY_BIAS)
    w = np.uint64(bk + KEY_BIAS)
    return (u << _U42) | (v << _U21) | w


@njit(cache=True)
def _unpack_key(key):
    bk = np.int64(key & _UMASK21) - KEY_BIAS
    bj = np.int64((key >> _U21) & _UMASK21) - KEY_BIAS
    bi = np.int64((key >> _U42) & _UMASK21) - KEY_BIAS
    return bi, bj, bk


@njit(cache=True)
def _mix64(key):
    z = np.uint64(key)
    z = (z ^ (z >> _U30)) * _UMUL1
    z = (z ^ (z >> _U27)) * _UMUL2
    return z ^ (z >> _U31)


@njit(cache=True, inline="always")
def _flat_block_lookup(bmin0, bmin1, bmin2, bs0, bs1, bs2, phi_flat, bi, bj, bk):
    ri = bi - bmin0
    rj = bj - bmin1
    rk = bk - bmin2
    if ri < 0 or rj < 0 or rk < 0 or ri >= bs0 or rj >= bs1 or rk >= bs2:
        return np.int64(-1)
    return phi_flat[(ri * bs1 + rj) * bs2 + rk]


@njit(cache=True, inline="always")
def _hash_block_lookup(keys, vals, bi, bj, bk):
    n_slots = np.uint64(len(keys))
    mask = n_slots - np.uint64(1)
    key = _pack_key(bi, bj, bk)
    s = _mix64(key) & mask
    for _ in range(len(keys)):
        stored = keys[s]
        if stored == key:
            return vals[s]
        if stored == _UEMPTY:
            return np.int64(-1)
        s = (s + np.uint64(1)) & mask
    return np.int64(-1)


@njit(cache=True, inline="always")
def _block_rank(mode, bmin0, bmin1, bmin2, bs0, bs1, bs2, phi_flat, keys, vals,
                bi, bj, bk):
    if mode == MODE_FLAT:
        return _flat_block_lookup(bmin0, bmin1, bmin2, bs0, bs1, bs2, phi_flat,
                                  bi, bj, bk)
    return _hash_block_lookup(keys, vals, bi, bj, bk)


@njit(cache=True, inline="always")
def _node_to_compact(mode, bmin0, bmin1, bmin2, bs0, bs1, bs2, phi_flat, keys,
                     vals, block_size, i, j, k):
    bi = i // block_size
    bj = j // block_size
    bk = k // block_size
    rank = _block_rank(mode, bmin0, bmin1, bmin2, bs0, bs1, bs2, phi_flat,
                       keys, vals, bi, bj, bk)
    if rank < 0:
        return np.int64(-1)
    li = i - block_size * bi
    lj = j - block_size * bj
    lk = k - block_size * bk
    return rank * block_size ** 3 + (li * block_size + lj) * block_size + lk


_EMPTY_I64 = np.empty(0, dtype=np.int64)
_EMPTY_U64 = np.empty(0, dtype=np.uint64)


class ActiveIndexMap:
    """Compact node indexing over the active blocks of one backend.

    ``active_blocks[r]`` is the block with rank ``r``; a node in that block
    has compact index ``r * block_size**3 + local_offset(node)``.  The rank
    lookup is either a flat array over a block-aligned bounding box (dense
    and scan backends) or an open-addressing hash table (hash backend).
    """

    def __init__(self, block_size, active_blocks, mode, bmin=None,
                 bshape=None, phi_flat=None, keys=None, vals=None):
        self.block_size = int(block_size)
        self.active_blocks = active_blocks
        self.mode = mode
        self.bmin = bmin if bmin is not None else np.zeros(3, dtype=np.int64)
        self.bshape = (bshape if bshape is not None
                       else np.zeros(3, dtype=np.int64))
        self.phi_flat = phi_flat if phi_flat is not None else _EMPTY_I64
        self.keys = keys if keys is not None else _EMPTY_U64
        self.vals = vals if vals is not None else _EMPTY_I64

    @property
    def n_blocks(self):
        return int(self.active_blocks.shape[0])

    @property
    def n_nodes(self):
        """Number of allocated node slots: every active block is full."""
        return self.n_blocks * self.block_size ** 3

    def block_index(self, block):
        """Rank of a block, or -1 if the block is not active."""
        bi, bj, bk = (int(c) for c in block)
        if self.mode == MODE_FLAT:
            return int(_flat_block_lookup(
                self.bmin[0], self.bmin[1], self.bmin[2],
                self.bshape[0], self.bshape[1], self.bshape[2],
                self.phi_flat, bi, bj, bk))
        return int(_hash_block_lookup(self.keys, self.vals, bi, bj, bk))

    def node_index(self, node):
        """Compact index of a node; raises InactiveNodeError on a miss."""
        b = block_of(node, self.block_size)
        rank = self.block_index(b)
        if rank < 0:
            raise InactiveNodeError(
                f"node {tuple(int(c) for c in node)} lies in inactive block {b}"
            )
        return rank * self.block_size ** 3 + local_offset(node, self.block_size)

    def node_coords(self):
        """(n_nodes, 3) integer coordinates of every allocated node slot,
        in compact-index order."""
        b = self.block_size
        rng = np.arange(b, dtype=np.int64)
        li, lj, lk = np.meshgrid(rng, rng, rng, indexing="ij")
        local = np.stack([li.ravel(), lj.ravel(), lk.ravel()], axis=1)
        base = self.active_blocks[:, None, :] * b
        return (base + local[None, :, :]).reshape(-1, 3)

    def kernel_args(self):
        """Flat argument tuple consumed by the jitted transfer kernels."""
        mode = MODE_FLAT if self.mode == MODE_FLAT else MODE_HASH
        return (np.int64(mode),
                np.int64(self.bmin[0]), np.int64(self.bmin[1]),
                np.int64(self.bmin[2]),
                np.int64(self.bshape[0]), np.int64(self.bshape[1]),
                np.int64(self.bshape[2]),
                self.phi_flat, self.keys, self.vals,
                np.int64(self.block_size))


def node_index(index_map, node):
    """Compact index of ``node`` under ``index_map`` (see ActiveIndexMap)."""
    return index_map.node_index(node)


def build_dense_grid(node_min, node_max, block_size=4):
    """Dense backend: activate every block overlapping a node range.

    ``node_min``/``node_max`` are inclusive node coordinate triples of the
    declared domain.  Ranks enumerate the block cover in row-major order,
    so the map is built once and reused for the whole run.
    """
    lo = np.asarray([c // block_size for c in node_min], dtype=np.int64)
    hi = np.asarray([c // block_size for c in node_max], dtype=np.int64)
    if np.any(hi < lo):
        raise ValueError("node_max must be >= node_min on every axis")
    for c in (lo * block_size, hi * block_size):
        pack_key(tuple(int(v) for v in c))
    bshape = hi - lo + 1
    ri = np.arange(bshape[0], dtype=np.int64)
    rj = np.arange(bshape[1], dtype=np.int64)
    rk = np.arange(bshape[2], dtype=np.int64)
    gi, gj, gk = np.meshgrid(ri, rj, rk, indexing="ij")
    active = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1) + lo
    phi_flat = np.arange(active.shape[0], dtype=np.int64)
    return ActiveIndexMap(block_size, active, MODE_FLAT, bmin=lo,
                          bshape=bshape, phi_flat=phi_flat)
