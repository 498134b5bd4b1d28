"""Constitutive models: Hencky hyperelasticity and Drucker-Prager sand.

Stress is evaluated in the principal frame of the deformation gradient.
The sand model is cohesionless and non-associative: trial Hencky strain is
projected back onto the yield cone (or its apex under net extension), and
the projected strain is written back into F so plastic flow is permanent.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import SimulationError

KIND_ELASTIC = 0
KIND_DRUCKER_PRAGER = 1

_KINDS = {"elastic": KIND_ELASTIC, "drucker_prager": KIND_DRUCKER_PRAGER}


@dataclass(frozen=True)
class MaterialModel:
    """Material parameters for one particle population."""

    kind: str
    density: float
    youngs_modulus: float
    poisson_ratio: float
    friction_angle_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(
                f"unknown material kind {self.kind!r}; "
                f"choose one of {sorted(_KINDS)}"
            )
        if self.density <= 0:
            raise ValueError(f"density must be positive, got {self.density}")
        if self.youngs_modulus <= 0:
            raise ValueError(
                f"youngs_modulus must be positive, got {self.youngs_modulus}"
            )
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError(
                f"poisson_ratio must lie in [0, 0.5), got {self.poisson_ratio}"
            )
        if not 0.0 <= self.friction_angle_deg < 90.0:
            raise ValueError(
                "friction_angle_deg must lie in [0, 90), "
                f"got {self.friction_angle_deg}"
            )

    @property
    def lame_mu(self):
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lame_lambda(self):
        e, nu = self.youngs_modulus, self.poisson_ratio
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def dp_alpha(self):
        """Cone slope of the Drucker-Prager yield surface in tau space."""
        s = math.sin(math.radians(self.friction_angle_deg))
        return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)

    @property
    def wave_speed(self):
        return math.sqrt(
            (self.lame_lambda + 2.0 * self.lame_mu) / self.density
        )

    @property
    def kind_id(self):
        return _KINDS[self.kind]


@njit(cache=True, inline="always")
def _det3(f):
    return (f[0, 0] * (f[1, 1] * f[2, 2] - f[1, 2] * f[2, 1])
            - f[0, 1] * (f[1, 0] * f[2, 2] - f[1, 2] * f[2, 0])
            + f[0, 2] * (f[1, 0] * f[2, 1] - f[1, 1] * f[2, 0]))


@njit(cache=True, inline="always")
def _jacobi_rotate(a, q, r0, r1):
    """One Jacobi rotation in the (r0, r1) plane of a symmetric 3x3.

    Annihilates a[r0, r1], accumulating the rotation into the columns of
    q.  Rotations are proper, so det q stays +1.
    """
    apr = a[r0, r1]
    if apr == 0.0:
        return
    app = a[r0, r0]
    arr = a[r1, r1]
    theta = 0.5 * (arr - app) / apr
    t = 1.0 / (abs(theta) + math.sqrt(1.0 + theta * theta))
    if theta < 0.0:
        t = -t
    c = 1.0 / math.sqrt(1.0 + t * t)
    s = t * c
    tau = s / (1.0 + c)
    a[r0, r0] = app - t * apr
    a[r1, r1] = arr + t * apr
    a[r0, r1] = 0.0
    a[r1, r0] = 0.0
    o = 3 - r0 - r1
    aop = a[o, r0]
    aor = a[o, r1]
    a[o, r0] = aop - s * (aor + tau * aop)
    a[r0, o] = a[o, r0]
    a[o, r1] = aor + s * (aop - tau * aor)
    a[r1, o] = a[o, r1]
    for i in range(3):
        qip = q[i, r0]
        qir = q[i, r1]
        q[i, r0] = c * qip - s * qir
        q[i, r1] = s * qip + c * qir


@njit(cache=True, inline="always")
def _sym_eigh3(a, q):
    """Cyclic Jacobi eigensolver for a symmetric 3x3 matrix.

    ``a`` is destroyed; its diagonal ends up holding the (unordered)
    eigenvalues.  ``q`` receives the matching eigenvectors as columns.
    Quadratic convergence makes a handful of sweeps plenty for full
    double precision on a 3x3.
    """
    for i in range(3):
        for j in range(3):
            q[i, j] = 1.0 if i == j else 0.0
    for _ in range(16):
        off = abs(a[0, 1]) + abs(a[0, 2]) + abs(a[1, 2])
        scale = abs(a[0, 0]) + abs(a[1, 1]) + abs(a[2, 2]) + off
        if off <= 1e-16 * scale:
            break
        _jacobi_rotate(a, q, 0, 1)
        _jacobi_rotate(a, q, 0, 2)
        _jacobi_rotate(a, q, 1, 2)


@njit(cache=True, inline="always")
def _dp_return_map(e0, e1, e2, alpha, stiff_ratio):
    """Project trial principal Hencky strain onto the friction cone.

    Net volumetric extension collapses to the apex (no tensile strength);
    otherwise the deviatoric magnitude shrinks by the plastic increment.
    """
    tr = e0 + e1 + e2
    if tr > 0.0:
        return 0.0, 0.0, 0.0
    m = tr / 3.0
    h0 = e0 - m
    h1 = e1 - m
    h2 = e2 - m
    en = math.sqrt(h0 * h0 + h1 * h1 + h2 * h2)
    dg = en + alpha * stiff_ratio * tr
    if dg <= 0.0 or en <= 0.0:
        return e0, e1, e2
    c = dg / en
    return e0 - c * h0, e1 - c * h1, e2 - c * h2


@njit(parallel=True, cache=True)
def _stress_kernel(fdef, sigma, jac, mat_id, mu_arr, lam_arr, alpha_arr,
                   kind_arr, err):
    n = fdef.shape[0]
    for p in prange(n):
        detf = _det3(fdef[p])
        if not (detf > 0.0) or not np.isfinite(detf):
            err[0] = 1
            err[1] = p
            continue
        # Right Cauchy-Green C = F^T F: eigenvalues are squared principal
        # stretches, eigenvectors the right singular frame.
        a = np.empty((3, 3))
        v = np.empty((3, 3))
        for i in range(3):
            for j in range(i, 3):
                cij = (fdef[p, 0, i] * fdef[p, 0, j]
                       + fdef[p, 1, i] * fdef[p, 1, j]
                       + fdef[p, 2, i] * fdef[p, 2, j])
                a[i, j] = cij
                a[j, i] = cij
        _sym_eigh3(a, v)
        if a[0, 0] <= 0.0 or a[1, 1] <= 0.0 or a[2, 2] <= 0.0:
            err[0] = 1
            err[1] = p
            continue
        s0 = math.sqrt(a[0, 0])
        s1 = math.sqrt(a[1, 1])
        s2 = math.sqrt(a[2, 2])
        # Left frame u_d = F v_d / s_d; det F > 0 keeps it proper, so no
        # reflection fix-up is needed.
        u = np.empty((3, 3))
        for i in range(3):
            u[i, 0] = (fdef[p, i, 0] * v[0, 0] + fdef[p, i, 1] * v[1, 0]
                       + fdef[p, i, 2] * v[2, 0]) / s0
            u[i, 1] = (fdef[p, i, 0] * v[0, 1] + fdef[p, i, 1] * v[1, 1]
                       + fdef[p, i, 2] * v[2, 1]) / s1
            u[i, 2] = (fdef[p, i, 0] * v[0, 2] + fdef[p, i, 1] * v[1, 2]
                       + fdef[p, i, 2] * v[2, 2]) / s2
        e0 = math.log(s0)
        e1 = math.log(s1)
        e2 = math.log(s2)
        mid = mat_id[p]
        mu = mu_arr[mid]
        lam = lam_arr[mid]
        if kind_arr[mid] == KIND_DRUCKER_PRAGER:
            ratio = (3.0 * lam + 2.0 * mu) / (2.0 * mu)
            p0, p1, p2 = _dp_return_map(e0, e1, e2, alpha_arr[mid], ratio)
            if p0 != e0 or p1 != e1 or p2 != e2:
                e0, e1, e2 = p0, p1, p2
                q0 = math.exp(e0)
                q1 = math.exp(e1)
                q2 = math.exp(e2)
                for i in range(3):
                    for j in range(3):
                        fdef[p, i, j] = (u[i, 0] * q0 * v[j, 0]
                                         + u[i, 1] * q1 * v[j, 1]
                                         + u[i, 2] * q2 * v[j, 2])
        trace = e0 + e1 + e2
        t0 = 2.0 * mu * e0 + lam * trace
        t1 = 2.0 * mu * e1 + lam * trace
        t2 = 2.0 * mu * e2 + lam * trace
        jp = math.exp(trace)
        jac[p] = jp
        inv_j = 1.0 / jp
        for i in range(3):
            for j in range(3):
                sigma[p, i, j] = inv_j * (t0 * u[i, 0] * u[j, 0]
                                          + t1 * u[i, 1] * u[j, 1]
                                          + t2 * u[i, 2] * u[j, 2])


def material_tables(materials):
    """Per-material parameter arrays indexed by material id."""
    mu = np.array([m.lame_mu for m in materials], dtype=np.float64)
    lam = np.array([m.lame_lambda for m in materials], dtype=np.float64)
    alpha = np.array([m.dp_alpha for m in materials], dtype=np.float64)
    kind = np.array([m.kind_id for m in materials], dtype=np.int64)
    return mu, lam, alpha, kind


def update_stress(particles, materials):
    """Refresh Cauchy stress (and Jacobian) from each particle's F.

    Drucker-Prager particles get their deformation gradient projected in
    place.  Raises SimulationError when any F is degenerate (det <= 0).
    """
    mu, lam, alpha, kind = material_tables(materials)
    err = np.zeros(2, dtype=np.int64)
    _stress_kernel(particles.F, particles.sigma, particles.jac,
                   particles.mat_id, mu, lam, alpha, kind, err)
    if err[0]:
        p = int(err[1])
        with np.errstate(invalid="ignore"):
            detf = float(np.linalg.det(particles.F[p]))
        raise SimulationError(
            f"deformation gradient of particle {p} is degenerate "
            f"(det F = {detf:.3e})"
        )
