"""Explicit APIC material point method over a compact active-node grid.

All transfer kernels address grid nodes through the backend-agnostic
compact index, so the dense, scan and hash grids run the same physics.
Scatter kernels exist in two flavours: parallel-over-particles with atomic
accumulation, and a serial variant whose accumulation order is fixed by
particle order (bitwise reproducible across backends and runs).
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange, set_num_threads

from ._atomics import _fetch_add_f64
from .errors import ConfigError, InactiveNodeError, SimulationError
from .grid_index import _block_rank, _node_to_compact, build_dense_grid
from .materials import material_tables, _stress_kernel
from .sparse_hash import build_hash_sparse_grid
from .sparse_scan import build_scan_sparse_grid, stencil_node_bounds

BACKENDS = ("dense", "scan", "hash")

BC_PLANE = 0
BC_HEIGHTFIELD = 1

# Bytes of nodal storage per allocated node: mass + velocity + force.
NODE_BYTES = 8 * (1 + 3 + 3)

MASS_FLOOR_SCALE = 1e-12


@njit(cache=True, inline="always")
def _stencil(xrow, inv_h, base, w, g):
    """Quadratic B-spline stencil for one particle.

    Fills per-axis node base, weights w[axis, offset] and weight
    derivatives g[axis, offset] with respect to x/h.
    """
    for a in range(3):
        u = xrow[a] * inv_h
        b = np.int64(np.floor(u - 0.5))
        d = u - np.float64(b)
        w[a, 0] = 0.5 * (1.5 - d) ** 2
        w[a, 1] = 0.75 - (d - 1.0) ** 2
        w[a, 2] = 0.5 * (d - 0.5) ** 2
        g[a, 0] = d - 1.5
        g[a, 1] = -2.0 * (d - 1.0)
        g[a, 2] = d - 0.5
        base[a] = b


@njit(cache=True)
def _stencil_once(xrow, inv_h, base, w, g):
    _stencil(xrow, inv_h, base, w, g)


@njit(cache=True, inline="always")
def _stencil_block_ranks(base, mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat,
                         hkeys, hvals, bsz, ranks):
    """Ranks of the (at most eight) blocks a particle stencil can touch.

    With block_size >= 2 the three stencil nodes per axis span at most two
    blocks, so one lookup per lo/hi corner replaces one per node.  A -1
    rank is only an error if some node actually lands in that block.
    Returns the local coordinates of the stencil base inside its lo block.
    """
    bi = base[0] // bsz
    bj = base[1] // bsz
    bk = base[2] // bsz
    for s in range(8):
        ranks[s] = _block_rank(mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat,
                               hkeys, hvals, bi + (s >> 2),
                               bj + ((s >> 1) & 1), bk + (s & 1))
    return base[0] - bi * bsz, base[1] - bj * bsz, base[2] - bk * bsz


def bspline_weights(x, h):
    """Per-axis quadratic B-spline data at position ``x``.

    Returns (base, w, dw): the lowest stencil node per axis, the three
    weights per axis, and their derivatives with respect to position.
    The 27 nodal weights are the tensor products w[0,i]*w[1,j]*w[2,k].
    """
    base = np.empty(3, dtype=np.int64)
    w = np.empty((3, 3))
    g = np.empty((3, 3))
    xrow = np.ascontiguousarray(x, dtype=np.float64)
    _stencil_once(xrow, 1.0 / float(h), base, w, g)
    return base, w, g / float(h)


@dataclass
class ParticleSet:
    """Structure-of-arrays particle state."""

    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    mat_id: np.ndarray
    sigma: np.ndarray
    jac: np.ndarray

    @property
    def n(self):
        return int(self.x.shape[0])

    @classmethod
    def from_samples(cls, positions, volumes, density, material_id=0,
                     velocity=(0.0, 0.0, 0.0)):
        """Fresh particles at rest state: F = I, C = 0, zero stress."""
        x = np.array(positions, dtype=np.float64)
        vol = np.array(volumes, dtype=np.float64)
        n = x.shape[0]
        v = np.tile(np.asarray(velocity, dtype=np.float64), (n, 1))
        eye = np.eye(3)
        return cls(
            x=x,
            v=np.ascontiguousarray(v),
            C=np.zeros((n, 3, 3)),
            F=np.ascontiguousarray(np.tile(eye, (n, 1, 1))),
            m=density * vol,
            V0=vol.copy(),
            mat_id=np.full(n, material_id, dtype=np.int64),
            sigma=np.zeros((n, 3, 3)),
            jac=np.ones(n),
        )

    @classmethod
    def merge(cls, sets):
        sets = list(sets)
        if not sets:
            raise ValueError("cannot merge zero particle sets")
        cat = lambda name: np.ascontiguousarray(
            np.concatenate([getattr(s, name) for s in sets], axis=0)
        )
        return cls(**{name: cat(name) for name in
                      ("x", "v", "C", "F", "m", "V0", "mat_id", "sigma",
                       "jac")})

    def copy(self):
        return ParticleSet(**{name: getattr(self, name).copy() for name in
                              ("x", "v", "C", "F", "m", "V0", "mat_id",
                               "sigma", "jac")})


@dataclass
class NodalFields:
    """Grid-side accumulators over the compact node range.

    ``vel`` holds momentum right after P2G and velocity after the grid
    update normalises it.
    """

    mass: np.ndarray
    vel: np.ndarray
    force: np.ndarray

    @classmethod
    def zeros(cls, n_nodes):
        return cls(mass=np.zeros(n_nodes), vel=np.zeros((n_nodes, 3)),
                   force=np.zeros((n_nodes, 3)))

    @property
    def n_nodes(self):
        return int(self.mass.shape[0])


@dataclass
class Heightfield:
    """Regular elevation samples: data[i, j] is the surface height at
    (x0 + i*cell, y0 + j*cell)."""

    x0: float
    y0: float
    cell: float
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 2:
            raise ValueError("heightfield needs at least 2x2 samples")
        if self.cell <= 0:
            raise ValueError(f"heightfield cell size must be positive, "
                             f"got {self.cell}")

    def sample(self, x, y):
        """Bilinear surface height at (x, y), clamped at the borders."""
        z, _, _ = _hf_sample(self.data, self.x0, self.y0, self.cell,
                             float(x), float(y))
        return float(z)

    def normal(self, x, y):
        """Unit upward surface normal at (x, y)."""
        _, zx, zy = _hf_sample(self.data, self.x0, self.y0, self.cell,
                               float(x), float(y))
        n = np.array([-zx, -zy, 1.0])
        return n / np.linalg.norm(n)


@dataclass
class BoundaryCondition:
    """Frictional contact with a half-space or terrain surface.

    ``kind`` is "plane" (half-space below ``point``/``normal``) or
    "heightfield" (everything under the sampled surface).  Grid nodes on
    or behind the surface get the Coulomb velocity projection.
    """

    kind: str = "plane"
    mu: float = 0.0
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0., 0., 1.]))
    heightfield: Heightfield | None = None

    def __post_init__(self):
        if self.kind not in ("plane", "heightfield"):
            raise ConfigError(
                f"unknown boundary kind {self.kind!r}; "
                "choose one of ['heightfield', 'plane']"
            )
        if self.mu < 0:
            raise ConfigError(f"friction coefficient must be >= 0, "
                              f"got {self.mu}")
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(normal)
        if self.kind == "plane":
            if length < 1e-12:
                raise ConfigError("boundary normal must be a nonzero vector")
            self.normal = normal / length
        if self.kind == "heightfield" and self.heightfield is None:
            raise ConfigError("heightfield boundary requires elevation data")


@njit(cache=True, inline="always")
def _hf_sample(data, x0, y0, cell, x, y):
    nx, ny = data.shape
    fx = (x - x0) / cell
    fy = (y - y0) / cell
    i0 = np.int64(np.floor(fx))
    j0 = np.int64(np.floor(fy))
    if i0 < 0:
        i0 = 0
    if i0 > nx - 2:
        i0 = nx - 2
    if j0 < 0:
        j0 = 0
    if j0 > ny - 2:
        j0 = ny - 2
    tx = fx - i0
    ty = fy - j0
    if tx < 0.0:
        tx = 0.0
    if tx > 1.0:
        tx = 1.0
    if ty < 0.0:
        ty = 0.0
    if ty > 1.0:
        ty = 1.0
    z00 = data[i0, j0]
    z10 = data[i0 + 1, j0]
    z01 = data[i0, j0 + 1]
    z11 = data[i0 + 1, j0 + 1]
    z = (z00 * (1.0 - tx) * (1.0 - ty) + z10 * tx * (1.0 - ty)
         + z01 * (1.0 - tx) * ty + z11 * tx * ty)
    dzdx = ((z10 - z00) * (1.0 - ty) + (z11 - z01) * ty) / cell
    dzdy = ((z01 - z00) * (1.0 - tx) + (z11 - z10) * tx) / cell
    return z, dzdx, dzdy


@njit(cache=True, inline="always")
def _coulomb_project(v0, v1, v2, n0, n1, n2, mu):
    vn = v0 * n0 + v1 * n1 + v2 * n2
    if vn >= 0.0:
        return v0, v1, v2
    t0 = v0 - vn * n0
    t1 = v1 - vn * n1
    t2 = v2 - vn * n2
    tnorm = math.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    if tnorm <= 0.0:
        return 0.0, 0.0, 0.0
    scale = 1.0 + mu * vn / tnorm
    if scale < 0.0:
        scale = 0.0
    return scale * t0, scale * t1, scale * t2


def apply_friction_boundary(v, normal, mu):
    """Coulomb contact projection of one velocity against a surface.

    Separating velocities pass through; approaching ones lose their normal
    component and have the tangential part scaled by
    max(0, 1 - mu*|v.n|/|v_t|).
    """
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    n = n / np.linalg.norm(n)
    r0, r1, r2 = _coulomb_project(v[0], v[1], v[2], n[0], n[1], n[2],
                                  float(mu))
    return np.array([r0, r1, r2])


@njit(parallel=True, cache=True)
def _p2g_par(xp, vp, cp, mp, inv_h, h,
             mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals, bsz,
             mass, mom, err):
    for p in prange(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        _stencil(xp[p], inv_h, base, w, g)
        mpart = mp[p]
        for oi in range(3):
            i = base[0] + oi
            dx0 = i * h - xp[p, 0]
            for oj in range(3):
                j = base[1] + oj
                dx1 = j * h - xp[p, 1]
                wij = w[0, oi] * w[1, oj]
                for ok in range(3):
                    k = base[2] + ok
                    idx = _node_to_compact(mode, bm0, bm1, bm2, bs0, bs1,
                                           bs2, phi_flat, hkeys, hvals, bsz,
                                           i, j, k)
                    if idx < 0:
                        err[0] = 1
                        continue
                    dx2 = k * h - xp[p, 2]
                    wijk = wij * w[2, ok]
                    _fetch_add_f64(mass, idx, wijk * mpart)
                    for d in range(3):
                        mv = mpart * (vp[p, d] + cp[p, d, 0] * dx0
                                      + cp[p, d, 1] * dx1 + cp[p, d, 2] * dx2)
                        _fetch_add_f64(mom, 3 * idx + d, wijk * mv)


@njit(cache=True)
def _p2g_ser(xp, vp, cp, mp, inv_h, h,
             mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals, bsz,
             mass, mom, err):
    for p in range(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        _stencil(xp[p], inv_h, base, w, g)
        mpart = mp[p]
        for oi in range(3):
            i = base[0] + oi
            dx0 = i * h - xp[p, 0]
            for oj in range(3):
                j = base[1] + oj
                dx1 = j * h - xp[p, 1]
                wij = w[0, oi] * w[1, oj]
                for ok in range(3):
                    k = base[2] + ok
                    idx = _node_to_compact(mode, bm0, bm1, bm2, bs0, bs1,
                                           bs2, phi_flat, hkeys, hvals, bsz,
                                           i, j, k)
                    if idx < 0:
                        err[0] = 1
                        continue
                    dx2 = k * h - xp[p, 2]
                    wijk = wij * w[2, ok]
                    mass[idx] += wijk * mpart
                    for d in range(3):
                        mv = mpart * (vp[p, d] + cp[p, d, 0] * dx0
                                      + cp[p, d, 1] * dx1 + cp[p, d, 2] * dx2)
                        mom[3 * idx + d] += wijk * mv


@njit(parallel=True, cache=True)
def _forces_par(xp, sigma, jac, v0p, mp, inv_h, h, g0, g1, g2,
                mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals,
                bsz, force, err):
    for p in prange(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        _stencil(xp[p], inv_h, base, w, g)
        vol = v0p[p] * jac[p]
        mpart = mp[p]
        for oi in range(3):
            i = base[0] + oi
            for oj in range(3):
                j = base[1] + oj
                for ok in range(3):
                    k = base[2] + ok
                    idx = _node_to_compact(mode, bm0, bm1, bm2, bs0, bs1,
                                           bs2, phi_flat, hkeys, hvals, bsz,
                                           i, j, k)
                    if idx < 0:
                        err[0] = 1
                        continue
                    wijk = w[0, oi] * w[1, oj] * w[2, ok]
                    gx = g[0, oi] * w[1, oj] * w[2, ok] * inv_h
                    gy = w[0, oi] * g[1, oj] * w[2, ok] * inv_h
                    gz = w[0, oi] * w[1, oj] * g[2, ok] * inv_h
                    fx = (-vol * (sigma[p, 0, 0] * gx + sigma[p, 0, 1] * gy
                                  + sigma[p, 0, 2] * gz) + wijk * mpart * g0)
                    fy = (-vol * (sigma[p, 1, 0] * gx + sigma[p, 1, 1] * gy
                                  + sigma[p, 1, 2] * gz) + wijk * mpart * g1)
                    fz = (-vol * (sigma[p, 2, 0] * gx + sigma[p, 2, 1] * gy
                                  + sigma[p, 2, 2] * gz) + wijk * mpart * g2)
                    _fetch_add_f64(force, 3 * idx, fx)
                    _fetch_add_f64(force, 3 * idx + 1, fy)
                    _fetch_add_f64(force, 3 * idx + 2, fz)


@njit(cache=True)
def _forces_ser(xp, sigma, jac, v0p, mp, inv_h, h, g0, g1, g2,
                mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals,
                bsz, force, err):
    for p in range(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        _stencil(xp[p], inv_h, base, w, g)
        vol = v0p[p] * jac[p]
        mpart = mp[p]
        for oi in range(3):
            i = base[0] + oi
            for oj in range(3):
                j = base[1] + oj
                for ok in range(3):
                    k = base[2] + ok
                    idx = _node_to_compact(mode, bm0, bm1, bm2, bs0, bs1,
                                           bs2, phi_flat, hkeys, hvals, bsz,
                                           i, j, k)
                    if idx < 0:
                        err[0] = 1
                        continue
                    wijk = w[0, oi] * w[1, oj] * w[2, ok]
                    gx = g[0, oi] * w[1, oj] * w[2, ok] * inv_h
                    gy = w[0, oi] * g[1, oj] * w[2, ok] * inv_h
                    gz = w[0, oi] * w[1, oj] * g[2, ok] * inv_h
                    force[3 * idx] += (-vol * (sigma[p, 0, 0] * gx
                                               + sigma[p, 0, 1] * gy
                                               + sigma[p, 0, 2] * gz)
                                       + wijk * mpart * g0)
                    force[3 * idx + 1] += (-vol * (sigma[p, 1, 0] * gx
                                                   + sigma[p, 1, 1] * gy
                                                   + sigma[p, 1, 2] * gz)
                                           + wijk * mpart * g1)
                    force[3 * idx + 2] += (-vol * (sigma[p, 2, 0] * gx
                                                   + sigma[p, 2, 1] * gy
                                                   + sigma[p, 2, 2] * gz)
                                           + wijk * mpart * g2)


@njit(cache=True)
def _scatter_particle(p, xp, vp, cp, mp, sigma, jac, v0p, inv_h, h,
                      g0, g1, g2, mode, bm0, bm1, bm2, bs0, bs1, bs2,
                      phi_flat, hkeys, hvals, bsz, mass, mom, force, err,
                      base, w, g, ranks, atomic):
    """Fused mass/momentum/force scatter of one particle: one stencil
    evaluation and at most eight block lookups for all 27 nodes."""
    _stencil(xp[p], inv_h, base, w, g)
    li0, lj0, lk0 = _stencil_block_ranks(base, mode, bm0, bm1, bm2,
                                         bs0, bs1, bs2, phi_flat, hkeys,
                                         hvals, bsz, ranks)
    bcube = bsz * bsz * bsz
    mpart = mp[p]
    vol = v0p[p] * jac[p]
    x0 = xp[p, 0]
    x1 = xp[p, 1]
    x2 = xp[p, 2]
    pv0 = vp[p, 0]
    pv1 = vp[p, 1]
    pv2 = vp[p, 2]
    c00 = cp[p, 0, 0]
    c01 = cp[p, 0, 1]
    c02 = cp[p, 0, 2]
    c10 = cp[p, 1, 0]
    c11 = cp[p, 1, 1]
    c12 = cp[p, 1, 2]
    c20 = cp[p, 2, 0]
    c21 = cp[p, 2, 1]
    c22 = cp[p, 2, 2]
    s00 = sigma[p, 0, 0]
    s01 = sigma[p, 0, 1]
    s02 = sigma[p, 0, 2]
    s10 = sigma[p, 1, 0]
    s11 = sigma[p, 1, 1]
    s12 = sigma[p, 1, 2]
    s20 = sigma[p, 2, 0]
    s21 = sigma[p, 2, 1]
    s22 = sigma[p, 2, 2]
    for oi in range(3):
        dx0 = (base[0] + oi) * h - x0
        ii = li0 + oi
        hi_i = ii >= bsz
        li = ii - bsz if hi_i else ii
        si = 4 if hi_i else 0
        for oj in range(3):
            dx1 = (base[1] + oj) * h - x1
            jj = lj0 + oj
            hi_j = jj >= bsz
            lj = jj - bsz if hi_j else jj
            sij = si + (2 if hi_j else 0)
            lij = (li * bsz + lj) * bsz
            for ok in range(3):
                kk = lk0 + ok
                hi_k = kk >= bsz
                lk = kk - bsz if hi_k else kk
                rank = ranks[sij + 1] if hi_k else ranks[sij]
                if rank < 0:
                    err[0] = 1
                    continue
                idx = rank * bcube + lij + lk
                dx2 = (base[2] + ok) * h - x2
                wijk = w[0, oi] * w[1, oj] * w[2, ok]
                gx = g[0, oi] * w[1, oj] * w[2, ok] * inv_h
                gy = w[0, oi] * g[1, oj] * w[2, ok] * inv_h
                gz = w[0, oi] * w[1, oj] * g[2, ok] * inv_h
                wm = wijk * mpart
                mv0 = mpart * (pv0 + c00 * dx0 + c01 * dx1 + c02 * dx2)
                mv1 = mpart * (pv1 + c10 * dx0 + c11 * dx1 + c12 * dx2)
                mv2 = mpart * (pv2 + c20 * dx0 + c21 * dx1 + c22 * dx2)
                fx = (-vol * (s00 * gx + s01 * gy + s02 * gz) + wm * g0)
                fy = (-vol * (s10 * gx + s11 * gy + s12 * gz) + wm * g1)
                fz = (-vol * (s20 * gx + s21 * gy + s22 * gz) + wm * g2)
                if atomic:
                    _fetch_add_f64(mass, idx, wm)
                    _fetch_add_f64(mom, 3 * idx, wijk * mv0)
                    _fetch_add_f64(mom, 3 * idx + 1, wijk * mv1)
                    _fetch_add_f64(mom, 3 * idx + 2, wijk * mv2)
                    _fetch_add_f64(force, 3 * idx, fx)
                    _fetch_add_f64(force, 3 * idx + 1, fy)
                    _fetch_add_f64(force, 3 * idx + 2, fz)
                else:
                    mass[idx] += wm
                    mom[3 * idx] += wijk * mv0
                    mom[3 * idx + 1] += wijk * mv1
                    mom[3 * idx + 2] += wijk * mv2
                    force[3 * idx] += fx
                    force[3 * idx + 1] += fy
                    force[3 * idx + 2] += fz


@njit(parallel=True, cache=True)
def _scatter_par(xp, vp, cp, mp, sigma, jac, v0p, inv_h, h, g0, g1, g2,
                 mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals,
                 bsz, mass, mom, force, err):
    for p in prange(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        ranks = np.empty(8, dtype=np.int64)
        _scatter_particle(p, xp, vp, cp, mp, sigma, jac, v0p, inv_h, h,
                          g0, g1, g2, mode, bm0, bm1, bm2, bs0, bs1, bs2,
                          phi_flat, hkeys, hvals, bsz, mass, mom, force,
                          err, base, w, g, ranks, True)


@njit(cache=True)
def _scatter_ser(xp, vp, cp, mp, sigma, jac, v0p, inv_h, h, g0, g1, g2,
                 mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals,
                 bsz, mass, mom, force, err):
    """Serial fused scatter; per-array accumulation order is particle
    order, exactly as in the unfused serial kernels."""
    base = np.empty(3, dtype=np.int64)
    w = np.empty((3, 3))
    g = np.empty((3, 3))
    ranks = np.empty(8, dtype=np.int64)
    for p in range(xp.shape[0]):
        _scatter_particle(p, xp, vp, cp, mp, sigma, jac, v0p, inv_h, h,
                          g0, g1, g2, mode, bm0, bm1, bm2, bs0, bs1, bs2,
                          phi_flat, hkeys, hvals, bsz, mass, mom, force,
                          err, base, w, g, ranks, False)


@njit(parallel=True, cache=True)
def _grid_update(mass, vel, force, active_blocks, bsz, h, dt, mass_floor,
                 bc_kind, bc_point, bc_normal, bc_mu,
                 hf_data, hf_x0, hf_y0, hf_cell):
    b3 = bsz * bsz * bsz
    n_bc = bc_kind.shape[0]
    for c in prange(mass.shape[0]):
        m = mass[c]
        if m <= mass_floor:
            vel[3 * c] = 0.0
            vel[3 * c + 1] = 0.0
            vel[3 * c + 2] = 0.0
            continue
        inv_m = 1.0 / m
        v0 = (vel[3 * c] + dt * force[3 * c]) * inv_m
        v1 = (vel[3 * c + 1] + dt * force[3 * c + 1]) * inv_m
        v2 = (vel[3 * c + 2] + dt * force[3 * c + 2]) * inv_m
        r = c // b3
        l = c - r * b3
        li = l // (bsz * bsz)
        rem = l - li * bsz * bsz
        lj = rem // bsz
        lk = rem - lj * bsz
        x0 = (active_blocks[r, 0] * bsz + li) * h
        x1 = (active_blocks[r, 1] * bsz + lj) * h
        x2 = (active_blocks[r, 2] * bsz + lk) * h
        for b in range(n_bc):
            if bc_kind[b] == BC_PLANE:
                n0 = bc_normal[b, 0]
                n1 = bc_normal[b, 1]
                n2 = bc_normal[b, 2]
                sdist = ((x0 - bc_point[b, 0]) * n0
                         + (x1 - bc_point[b, 1]) * n1
                         + (x2 - bc_point[b, 2]) * n2)
                if sdist <= 0.0:
                    v0, v1, v2 = _coulomb_project(v0, v1, v2, n0, n1, n2,
                                                  bc_mu[b])
            else:
                zs, zx, zy = _hf_sample(hf_data, hf_x0, hf_y0, hf_cell,
                                        x0, x1)
                if x2 - zs <= 0.0:
                    inv_len = 1.0 / math.sqrt(zx * zx + zy * zy + 1.0)
                    v0, v1, v2 = _coulomb_project(
                        v0, v1, v2, -zx * inv_len, -zy * inv_len, inv_len,
                        bc_mu[b])
        vel[3 * c] = v0
        vel[3 * c + 1] = v1
        vel[3 * c + 2] = v2


@njit(parallel=True, cache=True)
def _g2p(xp, vp, cp, fdef, vel, inv_h, h, dt,
         mode, bm0, bm1, bm2, bs0, bs1, bs2, phi_flat, hkeys, hvals, bsz,
         err):
    d_inv = 4.0 * inv_h * inv_h
    bcube = bsz * bsz * bsz
    for p in prange(xp.shape[0]):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        g = np.empty((3, 3))
        ranks = np.empty(8, dtype=np.int64)
        _stencil(xp[p], inv_h, base, w, g)
        li0, lj0, lk0 = _stencil_block_ranks(base, mode, bm0, bm1, bm2,
                                             bs0, bs1, bs2, phi_flat, hkeys,
                                             hvals, bsz, ranks)
        x0 = xp[p, 0]
        x1 = xp[p, 1]
        x2 = xp[p, 2]
        v0 = v1 = v2 = 0.0
        b00 = b01 = b02 = b10 = b11 = b12 = b20 = b21 = b22 = 0.0
        a00 = a01 = a02 = a10 = a11 = a12 = a20 = a21 = a22 = 0.0
        for oi in range(3):
            dx0 = (base[0] + oi) * h - x0
            ii = li0 + oi
            hi_i = ii >= bsz
            li = ii - bsz if hi_i else ii
            si = 4 if hi_i else 0
            for oj in range(3):
                dx1 = (base[1] + oj) * h - x1
                jj = lj0 + oj
                hi_j = jj >= bsz
                lj = jj - bsz if hi_j else jj
                sij = si + (2 if hi_j else 0)
                lij = (li * bsz + lj) * bsz
                for ok in range(3):
                    kk = lk0 + ok
                    hi_k = kk >= bsz
                    lk = kk - bsz if hi_k else kk
                    rank = ranks[sij + 1] if hi_k else ranks[sij]
                    if rank < 0:
                        err[0] = 1
                        continue
                    idx = rank * bcube + lij + lk
                    dx2 = (base[2] + ok) * h - x2
                    wijk = w[0, oi] * w[1, oj] * w[2, ok]
                    gx = g[0, oi] * w[1, oj] * w[2, ok] * inv_h
                    gy = w[0, oi] * g[1, oj] * w[2, ok] * inv_h
                    gz = w[0, oi] * w[1, oj] * g[2, ok] * inv_h
                    gv0 = vel[3 * idx]
                    gv1 = vel[3 * idx + 1]
                    gv2 = vel[3 * idx + 2]
                    v0 += wijk * gv0
                    v1 += wijk * gv1
                    v2 += wijk * gv2
                    b00 += wijk * gv0 * dx0
                    b01 += wijk * gv0 * dx1
                    b02 += wijk * gv0 * dx2
                    b10 += wijk * gv1 * dx0
                    b11 += wijk * gv1 * dx1
                    b12 += wijk * gv1 * dx2
                    b20 += wijk * gv2 * dx0
                    b21 += wijk * gv2 * dx1
                    b22 += wijk * gv2 * dx2
                    a00 += gv0 * gx
                    a01 += gv0 * gy
                    a02 += gv0 * gz
                    a10 += gv1 * gx
                    a11 += gv1 * gy
                    a12 += gv1 * gz
                    a20 += gv2 * gx
                    a21 += gv2 * gy
                    a22 += gv2 * gz
        vp[p, 0] = v0
        vp[p, 1] = v1
        vp[p, 2] = v2
        cp[p, 0, 0] = b00 * d_inv
        cp[p, 0, 1] = b01 * d_inv
        cp[p, 0, 2] = b02 * d_inv
        cp[p, 1, 0] = b10 * d_inv
        cp[p, 1, 1] = b11 * d_inv
        cp[p, 1, 2] = b12 * d_inv
        cp[p, 2, 0] = b20 * d_inv
        cp[p, 2, 1] = b21 * d_inv
        cp[p, 2, 2] = b22 * d_inv
        f00 = fdef[p, 0, 0]
        f01 = fdef[p, 0, 1]
        f02 = fdef[p, 0, 2]
        f10 = fdef[p, 1, 0]
        f11 = fdef[p, 1, 1]
        f12 = fdef[p, 1, 2]
        f20 = fdef[p, 2, 0]
        f21 = fdef[p, 2, 1]
        f22 = fdef[p, 2, 2]
        fdef[p, 0, 0] = f00 + dt * (a00 * f00 + a01 * f10 + a02 * f20)
        fdef[p, 0, 1] = f01 + dt * (a00 * f01 + a01 * f11 + a02 * f21)
        fdef[p, 0, 2] = f02 + dt * (a00 * f02 + a01 * f12 + a02 * f22)
        fdef[p, 1, 0] = f10 + dt * (a10 * f00 + a11 * f10 + a12 * f20)
        fdef[p, 1, 1] = f11 + dt * (a10 * f01 + a11 * f11 + a12 * f21)
        fdef[p, 1, 2] = f12 + dt * (a10 * f02 + a11 * f12 + a12 * f22)
        fdef[p, 2, 0] = f20 + dt * (a20 * f00 + a21 * f10 + a22 * f20)
        fdef[p, 2, 1] = f21 + dt * (a20 * f01 + a21 * f11 + a22 * f21)
        fdef[p, 2, 2] = f22 + dt * (a20 * f02 + a21 * f12 + a22 * f22)
        xp[p, 0] += dt * v0
        xp[p, 1] += dt * v1
        xp[p, 2] += dt * v2


@njit(parallel=True, cache=True)
def _mark_nodes(xp, inv_h, lo0, lo1, lo2, s1, s2, mask):
    for p in prange(xp.shape[0]):
        b0 = np.int64(np.floor(xp[p, 0] * inv_h - 0.5))
        b1 = np.int64(np.floor(xp[p, 1] * inv_h - 0.5))
        b2 = np.int64(np.floor(xp[p, 2] * inv_h - 0.5))
        for oi in range(3):
            ri = b0 + oi - lo0
            for oj in range(3):
                rj = b1 + oj - lo1
                for ok in range(3):
                    mask[(ri * s1 + rj) * s2 + (b2 + ok - lo2)] = 1


def count_active_nodes(positions, h):
    """Size of the union of all particle stencils (the active node set)."""
    node_lo, node_hi = stencil_node_bounds(positions, h)
    shape = node_hi - node_lo + 1
    mask = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    xp = np.ascontiguousarray(positions, dtype=np.float64)
    _mark_nodes(xp, 1.0 / float(h), node_lo[0], node_lo[1], node_lo[2],
                shape[1], shape[2], mask)
    return int(np.count_nonzero(mask))


@dataclass
class SimConfig:
    """Solver-level settings: grid resolution, timestep policy, backend."""

    h: float
    gravity: np.ndarray
    total_time: float
    domain_min: np.ndarray
    domain_max: np.ndarray
    dt: float | None = None
    cfl: float = 0.4
    block_size: int = 4
    backend: str = "scan"
    n_threads: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if self.h <= 0:
            raise ConfigError(f"grid cell size must be positive, got {self.h}")
        if self.total_time <= 0:
            raise ConfigError(
                f"total time must be positive, got {self.total_time}"
            )
        if self.dt is not None and self.dt <= 0:
            raise ConfigError(f"timestep must be positive, got {self.dt}")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.backend not in BACKENDS:
            raise ConfigError(
                f"unknown backend {self.backend!r}; "
                f"choose one of {sorted(BACKENDS)}"
            )
        # The transfer kernels resolve a particle stencil through at most
        # two blocks per axis, which needs blocks of at least two nodes.
        if self.block_size < 2:
            raise ConfigError(
                f"block size must be at least 2, got {self.block_size}"
            )
        if self.n_threads < 1:
            raise ConfigError(
                f"thread count must be at least 1, got {self.n_threads}"
            )
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.gravity)):
            raise ConfigError("gravity must be finite")
        self.domain_min = np.asarray(self.domain_min,
                                     dtype=np.float64).reshape(3)
        self.domain_max = np.asarray(self.domain_max,
                                     dtype=np.float64).reshape(3)
        if not np.all(self.domain_max > self.domain_min):
            raise ConfigError("domain_max must exceed domain_min on each axis")

    @property
    def node_min(self):
        return np.floor(self.domain_min / self.h).astype(np.int64)

    @property
    def node_max(self):
        return np.ceil(self.domain_max / self.h).astype(np.int64)


@dataclass
class StepStats:
    """Per-step record: timestep, active-set size and phase wall times."""

    step: int
    t: float
    dt: float
    n_active: int
    n_allocated: int
    times: dict
    mass_sum: float | None = None
    mom_sum: np.ndarray | None = None


PHASES = ("map_build", "alloc_zero", "p2g", "grid_update", "g2p", "stress")
EXTRA_PHASES = ("metrics",)

_EMPTY_HF = np.zeros((2, 2))


def _pack_boundaries(boundaries):
    boundaries = list(boundaries)
    nb = len(boundaries)
    kind = np.zeros(nb, dtype=np.int64)
    point = np.zeros((nb, 3))
    normal = np.zeros((nb, 3))
    mu = np.zeros(nb)
    hf_data, hf_x0, hf_y0, hf_cell = _EMPTY_HF, 0.0, 0.0, 1.0
    for b, bc in enumerate(boundaries):
        mu[b] = bc.mu
        if bc.kind == "plane":
            kind[b] = BC_PLANE
            point[b] = bc.point
            normal[b] = bc.normal
        else:
            kind[b] = BC_HEIGHTFIELD
            hf = bc.heightfield
            hf_data = hf.data
            hf_x0, hf_y0, hf_cell = float(hf.x0), float(hf.y0), float(hf.cell)
    return kind, point, normal, mu, hf_data, hf_x0, hf_y0, hf_cell


def p2g(particles, index_map, h, deterministic=True, fields=None):
    """Scatter particle mass and APIC momentum onto the active nodes.

    Returns NodalFields whose ``vel`` array holds nodal momentum.
    """
    if fields is None:
        fields = NodalFields.zeros(index_map.n_nodes)
    err = np.zeros(1, dtype=np.int64)
    kernel = _p2g_ser if deterministic else _p2g_par
    kernel(particles.x, particles.v, particles.C, particles.m,
           1.0 / float(h), float(h), *index_map.kernel_args(),
           fields.mass, fields.vel.reshape(-1), err)
    if err[0]:
        raise InactiveNodeError("particle stencil node outside active grid")
    return fields


def grid_forces(particles, index_map, h, gravity, deterministic=True,
                fields=None):
    """Scatter internal stress forces plus gravity onto the active nodes."""
    if fields is None:
        fields = NodalFields.zeros(index_map.n_nodes)
    gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
    err = np.zeros(1, dtype=np.int64)
    kernel = _forces_ser if deterministic else _forces_par
    kernel(particles.x, particles.sigma, particles.jac, particles.V0,
           particles.m, 1.0 / float(h), float(h),
           gravity[0], gravity[1], gravity[2], *index_map.kernel_args(),
           fields.force.reshape(-1), err)
    if err[0]:
        raise InactiveNodeError("particle stencil node outside active grid")
    return fields


def grid_update(fields, index_map, h, dt, mass_floor=0.0, boundaries=()):
    """Normalise momentum, apply forces and project boundary velocities.

    Nodes at or below ``mass_floor`` are zeroed instead of divided.
    """
    kind, point, normal, mu, hf_data, hf_x0, hf_y0, hf_cell = \
        _pack_boundaries(boundaries)
    _grid_update(fields.mass, fields.vel.reshape(-1),
                 fields.force.reshape(-1), index_map.active_blocks,
                 np.int64(index_map.block_size), float(h), float(dt),
                 float(mass_floor), kind, point, normal, mu,
                 hf_data, hf_x0, hf_y0, hf_cell)
    return fields


def g2p(particles, index_map, fields, h, dt):
    """Gather nodal velocities back to particles and advect them.

    Updates velocity, affine velocity field, deformation gradient and
    position in place.
    """
    err = np.zeros(1, dtype=np.int64)
    _g2p(particles.x, particles.v, particles.C, particles.F,
         fields.vel.reshape(-1), 1.0 / float(h), float(h), float(dt),
         *index_map.kernel_args(), err)
    if err[0]:
        raise InactiveNodeError("particle stencil node outside active grid")
    return particles


class Simulation:
    """One scenario instance: particles, materials, boundaries, stepping."""

    def __init__(self, particles, config, materials, boundaries=(),
                 record_conservation=False):
        self.particles = particles
        self.config = config
        self.materials = list(materials)
        self.boundaries = list(boundaries)
        self.record_conservation = record_conservation
        if particles.n == 0:
            raise ConfigError("simulation needs at least one particle")
        if len(self.materials) == 0:
            raise ConfigError("simulation needs at least one material")
        if particles.mat_id.min() < 0 or \
                particles.mat_id.max() >= len(self.materials):
            raise ConfigError("particle material id out of range")
        n_hf = sum(1 for b in self.boundaries if b.kind == "heightfield")
        if n_hf > 1:
            raise ConfigError("at most one heightfield boundary is supported")

        self._mu, self._lam, self._alpha, self._kind = material_tables(
            self.materials
        )
        self._wave_speed = max(m.wave_speed for m in self.materials)
        self._mass_floor = MASS_FLOOR_SCALE * float(particles.m.max())
        self._setup_boundaries()
        set_num_threads(config.n_threads)

        self._dense_map = None
        if config.backend == "dense":
            self._dense_map = build_dense_grid(
                config.node_min, config.node_max, config.block_size
            )
        self.t = 0.0
        self.step_count = 0
        self.last_fields = None
        self.last_map = None
        if config.dt is not None and config.dt > self.dt_bound():
            raise ConfigError(
                f"fixed timestep {config.dt:g} exceeds the stability bound "
                f"{self.dt_bound():g}"
            )

    def _setup_boundaries(self):
        (self._bc_kind, self._bc_point, self._bc_normal, self._bc_mu,
         self._hf_data, self._hf_x0, self._hf_y0,
         self._hf_cell) = _pack_boundaries(self.boundaries)

    @property
    def n_dense(self):
        """Allocated node count of the dense backend over this domain."""
        cfg = self.config
        blocks = (cfg.node_max // cfg.block_size
                  - cfg.node_min // cfg.block_size + 1)
        return int(np.prod(blocks)) * cfg.block_size ** 3

    def dt_bound(self):
        """CFL-limited timestep for the current particle velocities."""
        vmax = float(np.sqrt((self.particles.v ** 2).sum(axis=1).max()))
        return self.config.cfl * self.config.h / (self._wave_speed + vmax)

    def _build_map(self):
        cfg = self.config
        if cfg.backend == "dense":
            return self._dense_map
        if cfg.backend == "scan":
            return build_scan_sparse_grid(self.particles.x, cfg.h,
                                          cfg.block_size,
                                          n_segments=cfg.n_threads)
        return build_hash_sparse_grid(self.particles.x, cfg.h,
                                      cfg.block_size,
                                      deterministic=cfg.deterministic)

    def step(self, dt=None):
        """Advance one explicit step; returns its StepStats."""
        cfg = self.config
        ps = self.particles
        if not np.all(np.isfinite(ps.x)):
            raise SimulationError("non-finite particle position")
        times = {}

        t0 = time.perf_counter()
        err = np.zeros(2, dtype=np.int64)
        _stress_kernel(ps.F, ps.sigma, ps.jac, ps.mat_id, self._mu,
                       self._lam, self._alpha, self._kind, err)
        if err[0]:
            p = int(err[1])
            with np.errstate(invalid="ignore"):
                detf = float(np.linalg.det(ps.F[p]))
            raise SimulationError(
                f"deformation gradient of particle {p} is degenerate "
                f"(det F = {detf:.3e})"
            )
        bound = self.dt_bound()
        if dt is None:
            dt = cfg.dt if cfg.dt is not None else bound
        dt = float(dt)
        if dt <= 0:
            raise SimulationError(f"timestep must be positive, got {dt}")
        if dt > bound * (1.0 + 1e-9):
            raise SimulationError(
                f"timestep {dt:g} exceeds the stability bound {bound:g}"
            )
        times["stress"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        index_map = self._build_map()
        times["map_build"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        fields = NodalFields.zeros(index_map.n_nodes)
        times["alloc_zero"] = time.perf_counter() - t0

        margs = index_map.kernel_args()
        inv_h = 1.0 / cfg.h
        vel_flat = fields.vel.reshape(-1)
        force_flat = fields.force.reshape(-1)

        t0 = time.perf_counter()
        err = np.zeros(1, dtype=np.int64)
        scatter = _scatter_ser if cfg.deterministic else _scatter_par
        scatter(ps.x, ps.v, ps.C, ps.m, ps.sigma, ps.jac, ps.V0,
                inv_h, cfg.h,
                cfg.gravity[0], cfg.gravity[1], cfg.gravity[2], *margs,
                fields.mass, vel_flat, force_flat, err)
        if err[0]:
            raise InactiveNodeError(
                "a particle stencil node is outside the active grid; "
                "with the dense backend this means a particle left the "
                "declared domain"
            )
        times["p2g"] = time.perf_counter() - t0

        mass_sum = mom_sum = None
        t0 = time.perf_counter()
        if self.record_conservation:
            mass_sum = float(fields.mass.sum())
            mom_sum = fields.vel.sum(axis=0)
        n_active = count_active_nodes(ps.x, cfg.h)
        times["metrics"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        _grid_update(fields.mass, vel_flat, force_flat,
                     index_map.active_blocks, np.int64(cfg.block_size),
                     cfg.h, dt, self._mass_floor,
                     self._bc_kind, self._bc_point, self._bc_normal,
                     self._bc_mu, self._hf_data, self._hf_x0, self._hf_y0,
                     self._hf_cell)
        times["grid_update"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        err = np.zeros(1, dtype=np.int64)
        _g2p(ps.x, ps.v, ps.C, ps.F, vel_flat, inv_h, cfg.h, dt, *margs, err)
        if err[0]:
            raise InactiveNodeError(
                "a particle stencil node is outside the active grid"
            )
        times["g2p"] = time.perf_counter() - t0

        self.t += dt
        self.step_count += 1
        self.last_fields = fields
        self.last_map = index_map
        return StepStats(step=self.step_count, t=self.t, dt=dt,
                         n_active=n_active, n_allocated=index_map.n_nodes,
                         times=times, mass_sum=mass_sum, mom_sum=mom_sum)
