"""Benchmark harness: timed runs, frame output and dense/sparse comparison.

Wall time is split into the six compute phases recorded by the stepper.
Metric bookkeeping (active-node counting, conservation sums) and frame IO
are timed separately and never count towards compute totals.  Kernels are
JIT-warmed on a throwaway scene before any timed run.
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SimulationError
from .scenarios import (
    MaterialRegion,
    ScenarioConfig,
    build_simulation,
    load_config,
    write_metrics,
    write_particles,
)
from .materials import MaterialModel
from .solver import NODE_BYTES, PHASES, SimConfig

_WARMED = set()


def _warm_scenario(backend, deterministic):
    material = MaterialRegion(
        name="warm",
        model=MaterialModel(kind="drucker_prager", density=1000.0,
                            youngs_modulus=1e5, poisson_ratio=0.3,
                            friction_angle_deg=30.0),
        region_min=np.array([0.4, 0.4, 0.4]),
        region_max=np.array([0.6, 0.6, 0.6]),
        velocity=np.zeros(3),
    )
    sim = SimConfig(
        h=0.1, gravity=np.array([0.0, 0.0, -9.81]), total_time=1.0,
        domain_min=np.zeros(3), domain_max=np.ones(3),
        backend=backend, deterministic=deterministic,
    )
    from .solver import BoundaryCondition, Heightfield

    flat = Heightfield(x0=-1.0, y0=-1.0, cell=2.0,
                       data=np.full((2, 2), 0.05))
    boundaries = [
        BoundaryCondition(kind="plane", mu=0.3),
        BoundaryCondition(kind="heightfield", mu=0.3, heightfield=flat),
    ]
    return ScenarioConfig(name="warm", sim=sim, materials=[material],
                          boundaries=boundaries,
                          boundary_paths=[None, None])


def warm_kernels(backend="scan", deterministic=False):
    """Compile every kernel the given mode uses, off the timing path."""
    key = (backend, bool(deterministic))
    if key in _WARMED:
        return
    sim = build_simulation(_warm_scenario(backend, deterministic))
    sim.step()
    sim.step()
    _WARMED.add(key)


@dataclass
class RunMetrics:
    """Timing and sparsity record of one run."""

    scenario: str
    backend: str
    n_threads: int
    deterministic: bool
    n_particles: int
    n_dense: int
    physics_hash: str
    steps: list = field(default_factory=list)
    io_total: float = 0.0

    @property
    def n_steps(self):
        return len(self.steps)

    @property
    def sim_time(self):
        return self.steps[-1].t if self.steps else 0.0

    @property
    def phase_totals(self):
        totals = {phase: 0.0 for phase in PHASES}
        for s in self.steps:
            for phase in PHASES:
                totals[phase] += s.times[phase]
        return totals

    @property
    def compute_total(self):
        return sum(self.phase_totals.values())

    @property
    def metrics_total(self):
        return sum(s.times.get("metrics", 0.0) for s in self.steps)

    @property
    def peak_alloc_nodes(self):
        return max(s.n_allocated for s in self.steps)

    @property
    def peak_nodal_bytes(self):
        """Analytic peak nodal memory: allocated nodes x bytes per node."""
        return self.peak_alloc_nodes * NODE_BYTES

    @property
    def n_active_series(self):
        return [s.n_active for s in self.steps]

    @property
    def r_active(self):
        return sparsity_ratio(self.n_active_series, self.n_dense)

    def step_rows(self):
        rows = []
        for s in self.steps:
            row = {
                "row_kind": "step",
                "step": s.step,
                "t_s": repr(s.t),
                "dt_s": repr(s.dt),
                "n_active": s.n_active,
                "allocated_nodes": s.n_allocated,
            }
            for phase in PHASES:
                row[f"{phase}_s"] = repr(s.times[phase])
            row["metrics_s"] = repr(s.times.get("metrics", 0.0))
            if s.mass_sum is not None:
                row["mass_sum_kg"] = repr(s.mass_sum)
                row["mom_x"] = repr(float(s.mom_sum[0]))
                row["mom_y"] = repr(float(s.mom_sum[1]))
                row["mom_z"] = repr(float(s.mom_sum[2]))
            rows.append(row)
        return rows

    def summary_row(self):
        row = {
            "row_kind": "summary",
            "step": self.n_steps,
            "t_s": repr(self.sim_time),
            "scenario": self.scenario,
            "backend": self.backend,
            "threads": self.n_threads,
            "deterministic": self.deterministic,
            "n_particles": self.n_particles,
            "n_dense": self.n_dense,
            "max_n_active": max(self.n_active_series, default=0),
            "r_active": repr(self.r_active) if self.steps else "",
            "peak_alloc_nodes": self.peak_alloc_nodes if self.steps else 0,
            "peak_nodal_bytes": self.peak_nodal_bytes if self.steps else 0,
            "compute_total_s": repr(self.compute_total),
            "metrics_total_s": repr(self.metrics_total),
            "io_total_s": repr(self.io_total),
            "physics_hash": self.physics_hash,
        }
        for phase, total in self.phase_totals.items():
            row[f"{phase}_s"] = repr(total)
        return row


def run(scenario, backend=None, threads=None, deterministic=None,
        out_dir=None, max_steps=None, record_conservation=False,
        warm=True):
    """Execute a scenario and collect RunMetrics.

    ``scenario`` is a ScenarioConfig or a path to one.  ``out_dir`` enables
    frame CSVs at the configured cadence plus a metrics CSV.  ``max_steps``
    truncates the run (handy for fixed-step comparisons).
    """
    if isinstance(scenario, (str, Path)):
        scenario = load_config(scenario)
    sim = build_simulation(scenario, backend=backend, threads=threads,
                           deterministic=deterministic,
                           record_conservation=record_conservation)
    cfg = sim.config
    if warm:
        warm_kernels(cfg.backend, cfg.deterministic)
    metrics = RunMetrics(
        scenario=scenario.name,
        backend=cfg.backend,
        n_threads=cfg.n_threads,
        deterministic=cfg.deterministic,
        n_particles=sim.particles.n,
        n_dense=sim.n_dense,
        physics_hash=scenario.physics_hash(),
    )

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
    fps = scenario.fps
    frame = 0

    def emit_frame():
        nonlocal frame
        t0 = time.perf_counter()
        write_particles(out_path / f"frame_{frame:06d}.csv", sim.particles)
        metrics.io_total += time.perf_counter() - t0
        frame += 1

    if out_path is not None and fps > 0:
        emit_frame()

    total = cfg.total_time
    while sim.t < total - 1e-12:
        if max_steps is not None and sim.step_count >= max_steps:
            break
        dt = cfg.dt if cfg.dt is not None else sim.dt_bound()
        dt = min(dt, total - sim.t)
        stats = sim.step(dt)
        metrics.steps.append(stats)
        if out_path is not None and fps > 0:
            while sim.t >= (frame / fps) - 1e-9 and frame / fps <= total:
                emit_frame()

    if not metrics.steps:
        raise SimulationError("run finished without taking any step")
    if out_path is not None:
        write_metrics(out_path / "metrics.csv", metrics.step_rows(),
                      metrics.summary_row())
    return metrics


def sparsity_ratio(n_active_series, n_dense):
    """Worst-case sparsity win: min over steps of n_dense / n_active."""
    series = list(n_active_series)
    if not series:
        raise ValueError("sparsity ratio needs at least one step")
    if min(series) <= 0:
        raise ValueError(
            "degenerate run: a step had zero active nodes"
        )
    if n_dense <= 0:
        raise ValueError(f"n_dense must be positive, got {n_dense}")
    return min(float(n_dense) / float(n) for n in series)


@dataclass
class ComparisonReport:
    """Dense-baseline versus sparse-backend comparison."""

    scenario: str
    dense: RunMetrics
    sparse: RunMetrics

    @property
    def speedup(self):
        return self.dense.compute_total / self.sparse.compute_total

    @property
    def memory_reduction(self):
        return self.dense.peak_nodal_bytes / self.sparse.peak_nodal_bytes

    @property
    def r_active(self):
        return self.sparse.r_active

    def phase_table(self):
        dtot = self.dense.phase_totals
        stot = self.sparse.phase_totals
        table = {}
        for phase in PHASES:
            ratio = dtot[phase] / stot[phase] if stot[phase] > 0 else math.inf
            table[phase] = (dtot[phase], stot[phase], ratio)
        return table

    def rows(self):
        rows = []
        for phase, (d, s, ratio) in self.phase_table().items():
            rows.append({
                "row_kind": "phase",
                "phase": phase,
                "dense_s": repr(d),
                "sparse_s": repr(s),
                "ratio": repr(ratio),
            })
        return rows

    def summary_row(self):
        return {
            "row_kind": "summary",
            "phase": "total",
            "scenario": self.scenario,
            "sparse_backend": self.sparse.backend,
            "threads": self.sparse.n_threads,
            "steps": self.sparse.n_steps,
            "dense_s": repr(self.dense.compute_total),
            "sparse_s": repr(self.sparse.compute_total),
            "speedup": repr(self.speedup),
            "memory_reduction": repr(self.memory_reduction),
            "r_active": repr(self.r_active),
            "dense_peak_nodal_bytes": self.dense.peak_nodal_bytes,
            "sparse_peak_nodal_bytes": self.sparse.peak_nodal_bytes,
            "n_dense": self.sparse.n_dense,
            "max_n_active": max(self.sparse.n_active_series),
        }


def compare(dense_metrics, sparse_metrics):
    """Build a ComparisonReport; both runs must share physics and length.

    The baseline must come from the dense backend.  Raises ConfigError on
    mismatched scenarios and ValueError on role or step-count mismatch.
    """
    if dense_metrics.backend != "dense":
        raise ValueError(
            f"baseline run must use the dense backend, "
            f"got {dense_metrics.backend!r}"
        )
    if sparse_metrics.backend == "dense":
        raise ValueError("comparison run must use a sparse backend")
    if dense_metrics.physics_hash != sparse_metrics.physics_hash:
        raise ConfigError(
            "cannot compare runs of different scenarios "
            f"({dense_metrics.scenario!r} vs {sparse_metrics.scenario!r})"
        )
    if dense_metrics.n_steps != sparse_metrics.n_steps:
        raise ValueError(
            f"step counts differ: {dense_metrics.n_steps} dense vs "
            f"{sparse_metrics.n_steps} sparse"
        )
    return ComparisonReport(scenario=dense_metrics.scenario,
                            dense=dense_metrics, sparse=sparse_metrics)


def write_comparison(path, report):
    """Write the phase table and summary of a comparison as CSV."""
    write_metrics(path, report.rows(), report.summary_row())


def sliding_box_oracle(theta_deg, mu, g=9.81, t=1.0):
    """Rigid Coulomb slider on an incline: displacement after time t.

    Sticks (returns 0) when tan(theta) <= mu, otherwise slides with
    constant acceleration g*(sin(theta) - mu*cos(theta)).
    """
    theta = math.radians(theta_deg)
    if theta < 0 or theta >= math.pi / 2:
        raise ValueError(f"theta must lie in [0, 90) degrees, got {theta_deg}")
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if math.tan(theta) <= mu:
        return 0.0
    accel = g * (math.sin(theta) - mu * math.cos(theta))
    return 0.5 * accel * t * t


def slide_geometry(scenario):
    """Incline angle, friction and downslope direction implied by a
    scenario's gravity and first plane boundary."""
    plane = next((b for b in scenario.boundaries if b.kind == "plane"), None)
    if plane is None:
        raise ConfigError("scenario has no plane boundary")
    gvec = scenario.sim.gravity
    gmag = float(np.linalg.norm(gvec))
    if gmag <= 0:
        raise ConfigError("scenario gravity is zero")
    n = plane.normal
    cos_theta = float(np.dot(-gvec, n) / gmag)
    cos_theta = min(1.0, max(-1.0, cos_theta))
    theta_deg = math.degrees(math.acos(cos_theta))
    tangential = gvec - np.dot(gvec, n) * n
    tnorm = float(np.linalg.norm(tangential))
    downslope = tangential / tnorm if tnorm > 0 else np.zeros(3)
    return theta_deg, float(plane.mu), gmag, downslope


def runout_distance(positions, center_xy, quantile=0.99):
    """Robust deposit extent: the given quantile of horizontal distance
    from a column centre axis."""
    pos = np.asarray(positions, dtype=np.float64)
    dx = pos[:, 0] - center_xy[0]
    dy = pos[:, 1] - center_xy[1]
    return float(np.quantile(np.sqrt(dx * dx + dy * dy), quantile))
