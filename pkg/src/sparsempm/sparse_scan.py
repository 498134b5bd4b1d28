"""Scan-based sparse grid construction.

A flat mask over the candidate block domain (the block-aligned bounding box
of all particle stencils) is marked in parallel, then compacted with a
three-phase parallel exclusive scan.  The scan result is the block rank
array consumed by the shared active-node indexing.
"""

import numpy as np
from numba import get_num_threads, njit, prange

from .grid_index import MODE_FLAT, ActiveIndexMap, pack_key


@njit(cache=True)
def _stencil_base_bounds(xp, inv_h):
    lo0 = lo1 = lo2 = np.int64(2 ** 62)
    hi0 = hi1 = hi2 = np.int64(-(2 ** 62))
    for p in range(xp.shape[0]):
        b0 = np.int64(np.floor(xp[p, 0] * inv_h - 0.5))
        b1 = np.int64(np.floor(xp[p, 1] * inv_h - 0.5))
        b2 = np.int64(np.floor(xp[p, 2] * inv_h - 0.5))
        lo0 = min(lo0, b0)
        lo1 = min(lo1, b1)
        lo2 = min(lo2, b2)
        hi0 = max(hi0, b0)
        hi1 = max(hi1, b1)
        hi2 = max(hi2, b2)
    return lo0, lo1, lo2, hi0 + 2, hi1 + 2, hi2 + 2


def stencil_node_bounds(positions, h):
    """Inclusive node-coordinate AABB covering every particle stencil."""
    xp = np.ascontiguousarray(positions, dtype=np.float64)
    if xp.shape[0] == 0:
        raise ValueError("cannot bound the stencils of an empty particle set")
    if not np.all(np.isfinite(xp)):
        raise ValueError("particle positions must be finite")
    lo0, lo1, lo2, hi0, hi1, hi2 = _stencil_base_bounds(xp, 1.0 / float(h))
    return (np.array([lo0, lo1, lo2], dtype=np.int64),
            np.array([hi0, hi1, hi2], dtype=np.int64))


def candidate_domain(positions, h, block_size=4):
    """Block-coordinate AABB (inclusive) containing all particle stencils.

    Raises KeyRangeError if any corner block falls outside the packable
    coordinate range, and ValueError on an empty or non-finite input.
    """
    node_lo, node_hi = stencil_node_bounds(positions, h)
    b_lo = node_lo // block_size
    b_hi = node_hi // block_size
    pack_key(tuple(int(c) for c in b_lo))
    pack_key(tuple(int(c) for c in b_hi))
    return b_lo, b_hi


@njit(parallel=True, cache=True)
def _mark_blocks(xp, inv_h, block_size, blo0, blo1, blo2, bs0, bs1, bs2,
                 mask, err):
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
        if (ilo < blo0 or jlo < blo1 or klo < blo2 or ihi >= blo0 + bs0
                or jhi >= blo1 + bs1 or khi >= blo2 + bs2):
            err[0] = 1
            continue
        for bi in range(ilo, ihi + 1):
            ri = bi - blo0
            for bj in range(jlo, jhi + 1):
                rj = bj - blo1
                for bk in range(klo, khi + 1):
                    mask[(ri * bs1 + rj) * bs2 + (bk - blo2)] = 1


def mark_active_blocks(positions, h, block_size, b_lo, b_shape):
    """uint8 mask over the candidate domain, 1 where a block holds any
    stencil node.  Flat row-major layout (first axis slowest)."""
    xp = np.ascontiguousarray(positions, dtype=np.float64)
    b_lo = np.asarray(b_lo, dtype=np.int64)
    b_shape = np.asarray(b_shape, dtype=np.int64)
    mask = np.zeros(int(np.prod(b_shape)), dtype=np.uint8)
    err = np.zeros(1, dtype=np.int64)
    _mark_blocks(xp, 1.0 / float(h), block_size,
                 b_lo[0], b_lo[1], b_lo[2],
                 b_shape[0], b_shape[1], b_shape[2], mask, err)
    if err[0]:
        raise ValueError("particle stencil escapes the candidate domain")
    return mask


@njit(parallel=True, cache=True)
def _scan_locals(values, out, seg_totals, n_seg):
    n = values.shape[0]
    for t in prange(n_seg):
        lo = t * n // n_seg
        hi = (t + 1) * n // n_seg
        acc = np.int64(0)
        for i in range(lo, hi):
            out[i] = acc
            acc += values[i]
        seg_totals[t] = acc


@njit(parallel=True, cache=True)
def _scan_offsets(out, seg_starts, n_seg):
    n = out.shape[0]
    for t in prange(n_seg):
        lo = t * n // n_seg
        hi = (t + 1) * n // n_seg
        base = seg_starts[t]
        for i in range(lo, hi):
            out[i] += base


def parallel_exclusive_scan(values, n_segments=None):
    """Exclusive prefix sum of an integer array; returns (offsets, total).

    Three phases: per-segment local scans, a serial scan of segment totals,
    then a parallel offset add.  The segment layout depends only on
    ``n_segments``, so the result is identical for any thread count.
    """
    values = np.ascontiguousarray(values, dtype=np.int64)
    if n_segments is None:
        n_segments = get_num_threads()
    n_segments = max(1, min(int(n_segments), max(1, values.shape[0])))
    out = np.empty_like(values)
    if values.shape[0] == 0:
        return out, 0
    seg_totals = np.zeros(n_segments, dtype=np.int64)
    _scan_locals(values, out, seg_totals, n_segments)
    seg_starts = np.zeros(n_segments, dtype=np.int64)
    np.cumsum(seg_totals[:-1], out=seg_starts[1:])
    _scan_offsets(out, seg_starts, n_segments)
    return out, int(seg_totals.sum())


def build_block_map(mask, b_lo, b_shape, block_size=4, n_segments=None):
    """Compact a candidate-domain mask into an ActiveIndexMap.

    Block ranks follow the row-major order of the mask; unmarked blocks
    carry rank -1 in the flat lookup array.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    b_lo = np.asarray(b_lo, dtype=np.int64)
    b_shape = np.asarray(b_shape, dtype=np.int64)
    offsets, total = parallel_exclusive_scan(mask.astype(np.int64), n_segments)
    phi_flat = np.where(mask > 0, offsets, np.int64(-1))
    flat = np.flatnonzero(mask)
    plane = int(b_shape[1] * b_shape[2])
    bi = flat // plane
    rem = flat - bi * plane
    bj = rem // int(b_shape[2])
    bk = rem - bj * int(b_shape[2])
    active = np.stack([bi, bj, bk], axis=1).astype(np.int64) + b_lo
    return ActiveIndexMap(block_size, active, MODE_FLAT, bmin=b_lo,
                          bshape=b_shape, phi_flat=phi_flat)


def build_scan_sparse_grid(positions, h, block_size=4, n_segments=None):
    """Full scan pipeline: candidate domain, mask, scan, block map."""
    b_lo, b_hi = candidate_domain(positions, h, block_size)
    b_shape = b_hi - b_lo + 1
    mask = mark_active_blocks(positions, h, block_size, b_lo, b_shape)
    return build_block_map(mask, b_lo, b_shape, block_size, n_segments)
