"""Scenario configuration, particle seeding, terrain and CSV output.

Config files are YAML mappings with unit-suffixed keys.  Loading resolves
every default, so a loaded config echoes back complete; validation errors
always name the offending field.
"""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .materials import MaterialModel
from .solver import (
    BACKENDS,
    BoundaryCondition,
    Heightfield,
    ParticleSet,
    SimConfig,
    Simulation,
)

_GRID_KEYS = {"cell_size_m", "block_size", "domain_min_m", "domain_max_m"}
_TIME_KEYS = {"total_s", "dt_s", "cfl"}
_SOLVER_KEYS = {"backend", "threads", "deterministic"}
_OUTPUT_KEYS = {"frames_per_s"}
_MATERIAL_KEYS = {
    "name", "model", "density_kg_m3", "youngs_modulus_pa", "poisson_ratio",
    "friction_angle_deg", "region_min_m", "region_max_m",
    "initial_velocity_m_s",
}
_BOUNDARY_KEYS = {"type", "point_m", "normal", "friction_coeff", "path"}
_TOP_KEYS = {
    "schema_version", "name", "grid", "time", "gravity_m_s2",
    "particles_per_cell_per_axis", "materials", "boundaries", "output",
    "solver",
}

SCHEMA_VERSION = 1

_MODELS = ("elastic", "drucker_prager")


def _check_keys(mapping, allowed, ctx):
    if not isinstance(mapping, dict):
        raise ConfigError(f"'{ctx}' must be a mapping")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown field '{ctx}.{unknown[0]}'; "
            f"allowed fields: {sorted(allowed)}"
        )


def _require(mapping, key, ctx):
    if key not in mapping:
        raise ConfigError(f"missing required field '{ctx}.{key}'")
    return mapping[key]


def _as_float(value, ctx, positive=False, nonnegative=False):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{ctx}' must be a number, got {value!r}")
    if positive and not out > 0:
        raise ConfigError(f"field '{ctx}' must be positive, got {out}")
    if nonnegative and out < 0:
        raise ConfigError(f"field '{ctx}' must be >= 0, got {out}")
    return out


def _as_int(value, ctx, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"field '{ctx}' must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"field '{ctx}' must be >= {minimum}, got {value}")
    return int(value)


def _as_vec3(value, ctx):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"field '{ctx}' must be a list of 3 numbers")
    return [_as_float(v, f"{ctx}[{i}]") for i, v in enumerate(value)]


@dataclass
class MaterialRegion:
    """One axis-aligned box of particles sharing a material."""

    name: str
    model: MaterialModel
    region_min: np.ndarray
    region_max: np.ndarray
    velocity: np.ndarray


@dataclass
class ScenarioConfig:
    """A fully resolved scenario: solver settings plus scene content."""

    name: str
    sim: SimConfig
    materials: list
    boundaries: list
    boundary_paths: list
    ppc: int = 2
    fps: float = 0.0

    def to_dict(self):
        """Canonical mapping with every default resolved (YAML-safe)."""
        mats = []
        for mr in self.materials:
            entry = {
                "name": mr.name,
                "model": mr.model.kind,
                "density_kg_m3": float(mr.model.density),
                "youngs_modulus_pa": float(mr.model.youngs_modulus),
                "poisson_ratio": float(mr.model.poisson_ratio),
                "friction_angle_deg": float(mr.model.friction_angle_deg),
                "region_min_m": [float(v) for v in mr.region_min],
                "region_max_m": [float(v) for v in mr.region_max],
                "initial_velocity_m_s": [float(v) for v in mr.velocity],
            }
            mats.append(entry)
        bcs = []
        for bc, path in zip(self.boundaries, self.boundary_paths):
            if bc.kind == "plane":
                bcs.append({
                    "type": "plane",
                    "point_m": [float(v) for v in bc.point],
                    "normal": [float(v) for v in bc.normal],
                    "friction_coeff": float(bc.mu),
                })
            else:
                bcs.append({
                    "type": "heightfield",
                    "path": path,
                    "friction_coeff": float(bc.mu),
                })
        sim = self.sim
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "grid": {
                "cell_size_m": float(sim.h),
                "block_size": int(sim.block_size),
                "domain_min_m": [float(v) for v in sim.domain_min],
                "domain_max_m": [float(v) for v in sim.domain_max],
            },
            "time": {
                "total_s": float(sim.total_time),
                "dt_s": None if sim.dt is None else float(sim.dt),
                "cfl": float(sim.cfl),
            },
            "gravity_m_s2": [float(v) for v in sim.gravity],
            "particles_per_cell_per_axis": int(self.ppc),
            "materials": mats,
            "boundaries": bcs,
            "output": {"frames_per_s": float(self.fps)},
            "solver": {
                "backend": sim.backend,
                "threads": int(sim.n_threads),
                "deterministic": bool(sim.deterministic),
            },
        }

    def physics_hash(self):
        """Hash of everything that affects the trajectory (not the backend,
        thread count, determinism flag or output cadence)."""
        doc = self.to_dict()
        doc.pop("solver")
        doc.pop("output")
        doc.pop("name")
        text = yaml.safe_dump(doc, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _parse_material(entry, ctx):
    _check_keys(entry, _MATERIAL_KEYS, ctx)
    model = _require(entry, "model", ctx)
    if model not in _MODELS:
        raise ConfigError(
            f"field '{ctx}.model' must be one of {sorted(_MODELS)}, "
            f"got {model!r}"
        )
    if model == "drucker_prager":
        _require(entry, "friction_angle_deg", ctx)
    try:
        material = MaterialModel(
            kind=model,
            density=_as_float(_require(entry, "density_kg_m3", ctx),
                              f"{ctx}.density_kg_m3", positive=True),
            youngs_modulus=_as_float(
                _require(entry, "youngs_modulus_pa", ctx),
                f"{ctx}.youngs_modulus_pa", positive=True),
            poisson_ratio=_as_float(_require(entry, "poisson_ratio", ctx),
                                    f"{ctx}.poisson_ratio"),
            friction_angle_deg=_as_float(
                entry.get("friction_angle_deg", 0.0),
                f"{ctx}.friction_angle_deg", nonnegative=True),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"'{ctx}': {exc}")
    rmin = np.array(_as_vec3(_require(entry, "region_min_m", ctx),
                             f"{ctx}.region_min_m"))
    rmax = np.array(_as_vec3(_require(entry, "region_max_m", ctx),
                             f"{ctx}.region_max_m"))
    if not np.all(rmax > rmin):
        raise ConfigError(
            f"'{ctx}': region_max_m must exceed region_min_m on every axis"
        )
    vel = np.array(_as_vec3(entry.get("initial_velocity_m_s", [0, 0, 0]),
                            f"{ctx}.initial_velocity_m_s"))
    return MaterialRegion(
        name=str(entry.get("name", ctx)),
        model=material,
        region_min=rmin,
        region_max=rmax,
        velocity=vel,
    )


def _parse_boundary(entry, ctx, base_dir):
    _check_keys(entry, _BOUNDARY_KEYS, ctx)
    btype = _require(entry, "type", ctx)
    mu = _as_float(entry.get("friction_coeff", 0.0), f"{ctx}.friction_coeff",
                   nonnegative=True)
    if btype == "plane":
        point = np.array(_as_vec3(entry.get("point_m", [0, 0, 0]),
                                  f"{ctx}.point_m"))
        normal = np.array(_as_vec3(entry.get("normal", [0, 0, 1]),
                                   f"{ctx}.normal"))
        if np.linalg.norm(normal) < 1e-12:
            raise ConfigError(f"field '{ctx}.normal' must be nonzero")
        return BoundaryCondition(kind="plane", mu=mu, point=point,
                                 normal=normal), None
    if btype == "heightfield":
        path = str(_require(entry, "path", ctx))
        full = Path(path)
        if not full.is_absolute():
            full = base_dir / full
        hf = load_heightfield(full)
        return BoundaryCondition(kind="heightfield", mu=mu,
                                 heightfield=hf), path
    raise ConfigError(
        f"field '{ctx}.type' must be one of ['heightfield', 'plane'], "
        f"got {btype!r}"
    )


def parse_config(doc, name_default="scenario", base_dir=Path(".")):
    """Validate a raw mapping and resolve it into a ScenarioConfig."""
    _check_keys(doc, _TOP_KEYS, "config")
    version = _as_int(doc.get("schema_version", SCHEMA_VERSION),
                      "schema_version", minimum=1)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"field 'schema_version' must be {SCHEMA_VERSION}, got {version}"
        )
    grid = _require(doc, "grid", "config")
    _check_keys(grid, _GRID_KEYS, "grid")
    tm = _require(doc, "time", "config")
    _check_keys(tm, _TIME_KEYS, "time")
    solver = doc.get("solver", {})
    _check_keys(solver, _SOLVER_KEYS, "solver")
    output = doc.get("output", {})
    _check_keys(output, _OUTPUT_KEYS, "output")

    backend = solver.get("backend", "scan")
    if backend not in BACKENDS:
        raise ConfigError(
            f"field 'solver.backend' must be one of {sorted(BACKENDS)}, "
            f"got {backend!r}"
        )
    dt = tm.get("dt_s")
    sim = SimConfig(
        h=_as_float(_require(grid, "cell_size_m", "grid"),
                    "grid.cell_size_m", positive=True),
        gravity=np.array(_as_vec3(_require(doc, "gravity_m_s2", "config"),
                                  "gravity_m_s2")),
        total_time=_as_float(_require(tm, "total_s", "time"), "time.total_s",
                             positive=True),
        domain_min=np.array(_as_vec3(_require(grid, "domain_min_m", "grid"),
                                     "grid.domain_min_m")),
        domain_max=np.array(_as_vec3(_require(grid, "domain_max_m", "grid"),
                                     "grid.domain_max_m")),
        dt=None if dt is None else _as_float(dt, "time.dt_s", positive=True),
        cfl=_as_float(tm.get("cfl", 0.4), "time.cfl"),
        block_size=_as_int(grid.get("block_size", 4), "grid.block_size",
                           minimum=2),
        backend=backend,
        n_threads=_as_int(solver.get("threads", 1), "solver.threads",
                          minimum=1),
        deterministic=bool(solver.get("deterministic", False)),
    )

    raw_mats = _require(doc, "materials", "config")
    if not isinstance(raw_mats, list) or not raw_mats:
        raise ConfigError("field 'materials' must be a non-empty list")
    materials = [_parse_material(m, f"materials[{i}]")
                 for i, m in enumerate(raw_mats)]

    raw_bcs = doc.get("boundaries", [])
    if not isinstance(raw_bcs, list):
        raise ConfigError("field 'boundaries' must be a list")
    boundaries = []
    paths = []
    for i, b in enumerate(raw_bcs):
        bc, path = _parse_boundary(b, f"boundaries[{i}]", base_dir)
        boundaries.append(bc)
        paths.append(path)

    return ScenarioConfig(
        name=str(doc.get("name", name_default)),
        sim=sim,
        materials=materials,
        boundaries=boundaries,
        boundary_paths=paths,
        ppc=_as_int(doc.get("particles_per_cell_per_axis", 2),
                    "particles_per_cell_per_axis", minimum=1),
        fps=_as_float(output.get("frames_per_s", 0.0), "output.frames_per_s",
                      nonnegative=True),
    )


def load_config(path):
    """Load and validate a scenario YAML file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a YAML mapping")
    return parse_config(doc, name_default=path.stem, base_dir=path.parent)


def save_config(path, scenario):
    """Write a resolved scenario back out as YAML."""
    Path(path).write_text(yaml.safe_dump(scenario.to_dict(), sort_keys=True))


def sample_box(region_min, region_max, h, ppc=2):
    """Deterministic lattice seeding of an axis-aligned box.

    Targets ppc**3 particles per grid cell; per-particle volumes sum to
    the exact box volume and every particle lies strictly inside.
    Returns (positions, volumes).
    """
    rmin = np.asarray(region_min, dtype=np.float64).reshape(3)
    rmax = np.asarray(region_max, dtype=np.float64).reshape(3)
    ext = rmax - rmin
    if np.any(ext <= 0):
        raise ValueError("region_max must exceed region_min on every axis")
    if h <= 0:
        raise ValueError(f"cell size must be positive, got {h}")
    spacing = float(h) / int(ppc)
    counts = np.maximum(1, np.rint(ext / spacing).astype(np.int64))
    axes = [rmin[a] + (np.arange(counts[a]) + 0.5) * (ext[a] / counts[a])
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    n = positions.shape[0]
    volumes = np.full(n, float(np.prod(ext)) / n)
    return positions, volumes


def build_particles(scenario):
    """Seed every material region of a scenario into one ParticleSet."""
    sets = []
    for mat_id, mr in enumerate(scenario.materials):
        pos, vol = sample_box(mr.region_min, mr.region_max, scenario.sim.h,
                              scenario.ppc)
        sets.append(ParticleSet.from_samples(
            pos, vol, mr.model.density, material_id=mat_id,
            velocity=mr.velocity,
        ))
    return ParticleSet.merge(sets)


def build_simulation(scenario, backend=None, threads=None,
                     deterministic=None, record_conservation=False):
    """Instantiate a Simulation from a scenario, with optional overrides."""
    sim = scenario.sim
    cfg = SimConfig(
        h=sim.h, gravity=sim.gravity.copy(), total_time=sim.total_time,
        domain_min=sim.domain_min.copy(), domain_max=sim.domain_max.copy(),
        dt=sim.dt, cfl=sim.cfl, block_size=sim.block_size,
        backend=sim.backend if backend is None else backend,
        n_threads=sim.n_threads if threads is None else int(threads),
        deterministic=(sim.deterministic if deterministic is None
                       else bool(deterministic)),
    )
    particles = build_particles(scenario)
    materials = [mr.model for mr in scenario.materials]
    return Simulation(particles, cfg, materials, scenario.boundaries,
                      record_conservation=record_conservation)


_HF_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def load_heightfield(path):
    """Parse an ESRI ASCII grid into a Heightfield.

    Row 1 of the file is the northernmost row; samples are taken at cell
    centres.  NODATA cells are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"heightfield file not found: {path}")
    tokens = path.read_text().split("\n")
    header = {}
    row_start = 0
    for lineno, line in enumerate(tokens):
        parts = line.split()
        if not parts:
            row_start = lineno + 1
            continue
        key = parts[0].lower()
        if key in _HF_HEADER_KEYS or key == "nodata_value":
            if len(parts) != 2:
                raise ConfigError(
                    f"{path}:{lineno + 1}: header line '{key}' needs exactly "
                    "one value"
                )
            header[key] = parts[1]
            row_start = lineno + 1
        else:
            break
    for key in _HF_HEADER_KEYS:
        if key not in header:
            raise ConfigError(
                f"{path}: missing heightfield header field '{key}'"
            )
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cell = float(header["cellsize"])
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed heightfield header: {exc}")
    if ncols < 2 or nrows < 2:
        raise ConfigError(
            f"{path}: heightfield must be at least 2x2, got "
            f"{nrows}x{ncols}"
        )
    if cell <= 0:
        raise ConfigError(f"{path}: cellsize must be positive, got {cell}")
    body = "\n".join(tokens[row_start:]).split()
    if len(body) != nrows * ncols:
        raise ConfigError(
            f"{path}: expected {nrows * ncols} elevation values "
            f"({nrows} rows x {ncols} cols), found {len(body)}"
        )
    try:
        values = np.array([float(v) for v in body])
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed elevation value: {exc}")
    if "nodata_value" in header:
        nodata = float(header["nodata_value"])
        if np.any(values == nodata):
            raise ConfigError(f"{path}: heightfield contains NODATA cells")
    rows = values.reshape(nrows, ncols)
    data = np.ascontiguousarray(np.flipud(rows).T)
    return Heightfield(x0=xll + cell / 2, y0=yll + cell / 2, cell=cell,
                       data=data)


_PARTICLE_FIELDS = ("id", "x_m", "y_m", "z_m", "vx_m_s", "vy_m_s", "vz_m_s")


def write_particles(path, particles):
    """Write particle positions and velocities as CSV (full precision)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_PARTICLE_FIELDS)
        for i in range(particles.n):
            writer.writerow([
                i,
                repr(float(particles.x[i, 0])),
                repr(float(particles.x[i, 1])),
                repr(float(particles.x[i, 2])),
                repr(float(particles.v[i, 0])),
                repr(float(particles.v[i, 1])),
                repr(float(particles.v[i, 2])),
            ])


def read_particles(path):
    """Read back a particle CSV; returns (positions, velocities)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != list(_PARTICLE_FIELDS):
            raise ConfigError(f"{path}: unexpected particle CSV header")
        rows = [row for row in reader]
    pos = np.array([[float(r[1]), float(r[2]), float(r[3])] for r in rows])
    vel = np.array([[float(r[4]), float(r[5]), float(r[6])] for r in rows])
    if len(rows) == 0:
        pos = pos.reshape(0, 3)
        vel = vel.reshape(0, 3)
    return pos, vel


def write_metrics(path, step_rows, summary=None):
    """Write per-step metric rows plus one trailing summary row."""
    step_rows = list(step_rows)
    fields = []
    for row in step_rows + ([summary] if summary else []):
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for row in step_rows:
            writer.writerow(row)
        if summary:
            writer.writerow(summary)


def read_metrics(path):
    """Read back a metrics CSV; returns (step_rows, summary_or_None)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and rows[-1].get("row_kind") == "summary":
        return rows[:-1], rows[-1]
    return rows, None
