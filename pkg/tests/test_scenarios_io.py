"""Tests for config parsing, particle seeding, terrain and CSV round trips."""

from pathlib import Path

import numpy as np
import pytest
import yaml

from sparsempm.errors import ConfigError
from sparsempm.scenarios import (
    build_particles,
    load_config,
    load_heightfield,
    parse_config,
    read_metrics,
    read_particles,
    sample_box,
    save_config,
    write_metrics,
    write_particles,
)
from sparsempm.solver import ParticleSet


def _base_doc():
    return {
        "name": "unit",
        "grid": {
            "cell_size_m": 0.05,
            "domain_min_m": [0.0, 0.0, 0.0],
            "domain_max_m": [1.0, 1.0, 1.0],
        },
        "time": {"total_s": 0.5},
        "gravity_m_s2": [0.0, 0.0, -9.81],
        "materials": [{
            "model": "elastic",
            "density_kg_m3": 1000.0,
            "youngs_modulus_pa": 1e6,
            "poisson_ratio": 0.3,
            "region_min_m": [0.3, 0.3, 0.3],
            "region_max_m": [0.7, 0.7, 0.7],
        }],
        "boundaries": [{
            "type": "plane",
            "point_m": [0.0, 0.0, 0.1],
            "normal": [0.0, 0.0, 1.0],
            "friction_coeff": 0.4,
        }],
    }


class TestParseConfig:
    def test_minimal_document_resolves_defaults(self):
        sc = parse_config(_base_doc())
        assert sc.name == "unit"
        assert sc.sim.backend == "scan"
        assert sc.sim.block_size == 4
        assert sc.sim.cfl == 0.4
        assert sc.sim.dt is None
        assert sc.sim.n_threads == 1
        assert sc.sim.deterministic is False
        assert sc.ppc == 2
        assert sc.fps == 0.0
        assert len(sc.materials) == 1 and len(sc.boundaries) == 1

    def test_solver_and_output_sections(self):
        doc = _base_doc()
        doc["solver"] = {"backend": "hash", "threads": 4,
                         "deterministic": True}
        doc["output"] = {"frames_per_s": 30.0}
        doc["time"]["dt_s"] = 1e-4
        sc = parse_config(doc)
        assert sc.sim.backend == "hash"
        assert sc.sim.n_threads == 4
        assert sc.sim.deterministic is True
        assert sc.fps == 30.0
        assert sc.sim.dt == 1e-4

    @pytest.mark.parametrize("mutate,needle", [
        (lambda d: d.update(typo=1), "config.typo"),
        (lambda d: d["grid"].update(cells=9), "grid.cells"),
        (lambda d: d["grid"].pop("cell_size_m"), "grid.cell_size_m"),
        (lambda d: d["time"].pop("total_s"), "time.total_s"),
        (lambda d: d.pop("gravity_m_s2"), "gravity_m_s2"),
        (lambda d: d.pop("materials"), "materials"),
        (lambda d: d["grid"].update(cell_size_m="fast"),
         "grid.cell_size_m.*number"),
        (lambda d: d["grid"].update(cell_size_m=-0.1),
         "grid.cell_size_m.*positive"),
        (lambda d: d["grid"].update(block_size=1), "grid.block_size"),
        (lambda d: d["grid"].update(block_size=2.5), "grid.block_size"),
        (lambda d: d["time"].update(total_s=0.0), "time.total_s"),
        (lambda d: d["time"].update(cfl=0.0), "cfl"),
        (lambda d: d.update(gravity_m_s2=[0.0, 1.0]), "gravity_m_s2"),
        (lambda d: d.update(particles_per_cell_per_axis=0),
         "particles_per_cell_per_axis"),
        (lambda d: d.update(solver={"backend": "cuda"}), "solver.backend"),
        (lambda d: d.update(solver={"threads": 0}), "solver.threads"),
        (lambda d: d.update(output={"frames_per_s": -1}), "frames_per_s"),
        (lambda d: d.update(schema_version=2), "schema_version"),
        (lambda d: d.update(schema_version="one"), "schema_version"),
    ])
    def test_malformed_fields_name_the_culprit(self, mutate, needle):
        doc = _base_doc()
        mutate(doc)
        with pytest.raises(ConfigError, match=needle):
            parse_config(doc)

    @pytest.mark.parametrize("mutate,needle", [
        (lambda m: m.update(model="viscous"), r"materials\[0\].model"),
        (lambda m: m.pop("density_kg_m3"), "density_kg_m3"),
        (lambda m: m.update(density_kg_m3=0), "density_kg_m3"),
        (lambda m: m.update(poisson_ratio=0.6), "poisson_ratio"),
        (lambda m: m.update(region_min_m=[0.8, 0.3, 0.3]), "region_max_m"),
        (lambda m: m.update(label="sand"), r"materials\[0\].label"),
    ])
    def test_malformed_materials(self, mutate, needle):
        doc = _base_doc()
        mutate(doc["materials"][0])
        with pytest.raises(ConfigError, match=needle):
            parse_config(doc)

    def test_sand_requires_friction_angle(self):
        doc = _base_doc()
        doc["materials"][0]["model"] = "drucker_prager"
        with pytest.raises(ConfigError, match="friction_angle_deg"):
            parse_config(doc)
        doc["materials"][0]["friction_angle_deg"] = 30.0
        assert parse_config(doc).materials[0].model.kind == "drucker_prager"

    @pytest.mark.parametrize("mutate,needle", [
        (lambda b: b.update(type="sphere"), r"boundaries\[0\].type"),
        (lambda b: b.update(normal=[0, 0, 0]), "normal"),
        (lambda b: b.update(friction_coeff=-0.1), "friction_coeff"),
        (lambda b: b.update(radius=2.0), r"boundaries\[0\].radius"),
    ])
    def test_malformed_boundaries(self, mutate, needle):
        doc = _base_doc()
        mutate(doc["boundaries"][0])
        with pytest.raises(ConfigError, match=needle):
            parse_config(doc)

    def test_heightfield_boundary_requires_path(self):
        doc = _base_doc()
        doc["boundaries"] = [{"type": "heightfield", "friction_coeff": 0.2}]
        with pytest.raises(ConfigError, match="path"):
            parse_config(doc)


class TestConfigFiles:
    def test_yaml_round_trip_preserves_everything(self, tmp_path):
        sc = parse_config(_base_doc())
        path = tmp_path / "scene.yaml"
        save_config(path, sc)
        sc2 = load_config(path)
        assert sc2.to_dict() == sc.to_dict()
        assert sc2.physics_hash() == sc.physics_hash()

    def test_physics_hash_ignores_presentation(self):
        base = parse_config(_base_doc())
        doc = _base_doc()
        doc["name"] = "renamed"
        doc["solver"] = {"backend": "hash", "threads": 8,
                         "deterministic": True}
        doc["output"] = {"frames_per_s": 60.0}
        other = parse_config(doc)
        assert other.physics_hash() == base.physics_hash()

    def test_physics_hash_tracks_physical_changes(self):
        base = parse_config(_base_doc())
        doc = _base_doc()
        doc["gravity_m_s2"] = [0.0, 0.0, -9.8]
        assert parse_config(doc).physics_hash() != base.physics_hash()
        doc = _base_doc()
        doc["materials"][0]["youngs_modulus_pa"] = 2e6
        assert parse_config(doc).physics_hash() != base.physics_hash()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("grid: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(path)

    def test_non_mapping_document(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_filename_becomes_default_name(self, tmp_path):
        doc = _base_doc()
        doc.pop("name")
        path = tmp_path / "granular_test.yaml"
        path.write_text(yaml.safe_dump(doc))
        assert load_config(path).name == "granular_test"


class TestSampleBox:
    def test_counts_match_target_density(self):
        pos, vol = sample_box((0.0, 0.0, 0.0), (0.2, 0.2, 0.2), 0.1, ppc=2)
        assert pos.shape == (64, 3), "2 cells x 2 ppc per axis gives 4^3"
        pos, vol = sample_box((0.0, 0.0, 0.0), (0.1, 0.1, 0.1), 0.1, ppc=3)
        assert pos.shape == (27, 3)

    def test_volumes_sum_to_box_volume(self):
        pos, vol = sample_box((0.1, 0.2, 0.3), (0.5, 0.6, 0.9), 0.05)
        box = 0.4 * 0.4 * 0.6
        assert abs(vol.sum() - box) < 1e-12 * box
        assert np.all(vol == vol[0]), "lattice samples share one volume"

    def test_particles_strictly_inside(self):
        rmin = np.array([0.1, 0.2, 0.3])
        rmax = np.array([0.45, 0.61, 0.72])
        pos, _ = sample_box(rmin, rmax, 0.07)
        assert np.all(pos > rmin) and np.all(pos < rmax)

    def test_lattice_is_uniform(self):
        pos, _ = sample_box((0.0, 0.0, 0.0), (0.2, 0.2, 0.2), 0.1, ppc=2)
        xs = np.unique(pos[:, 0])
        assert len(xs) == 4
        assert np.allclose(np.diff(xs), 0.05, atol=1e-15)
        assert abs(xs[0] - 0.025) < 1e-15

    def test_sampling_is_deterministic(self):
        a = sample_box((0.0, 0.0, 0.0), (0.3, 0.3, 0.3), 0.04)
        b = sample_box((0.0, 0.0, 0.0), (0.3, 0.3, 0.3), 0.04)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_sub_cell_box_gets_one_particle(self):
        pos, vol = sample_box((0.0, 0.0, 0.0), (0.01, 0.01, 0.01), 1.0)
        assert pos.shape == (1, 3)
        assert np.allclose(pos[0], 0.005)
        assert abs(vol[0] - 1e-6) < 1e-18

    def test_invalid_regions_rejected(self):
        with pytest.raises(ValueError):
            sample_box((0.5, 0.0, 0.0), (0.4, 1.0, 1.0), 0.1)
        with pytest.raises(ValueError):
            sample_box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)

    def test_build_particles_merges_regions(self):
        doc = _base_doc()
        doc["materials"].append({
            "model": "drucker_prager",
            "density_kg_m3": 1500.0,
            "youngs_modulus_pa": 1e6,
            "poisson_ratio": 0.3,
            "friction_angle_deg": 30.0,
            "region_min_m": [0.0, 0.0, 0.8],
            "region_max_m": [0.1, 0.1, 0.9],
            "initial_velocity_m_s": [1.0, 0.0, 0.0],
        })
        sc = parse_config(doc)
        ps = build_particles(sc)
        n0, _ = sample_box([0.3] * 3, [0.7] * 3, 0.05)
        assert ps.n > len(n0), "second region adds particles"
        assert set(np.unique(ps.mat_id)) == {0, 1}
        sand = ps.mat_id == 1
        assert np.all(ps.v[sand, 0] == 1.0)
        assert np.all(ps.v[~sand, 0] == 0.0)
        rho = ps.m[sand] / ps.V0[sand]
        assert np.allclose(rho, 1500.0, rtol=1e-12)


_ASC = """\
ncols 3
nrows 2
xllcorner 0.0
yllcorner 0.0
cellsize 1.0
10 11 12
0 1 2
"""


class TestHeightfieldIO:
    def test_load_and_sample(self, tmp_path):
        path = tmp_path / "terrain.asc"
        path.write_text(_ASC)
        hf = load_heightfield(path)
        # First file row is the northern edge; samples sit at cell centres.
        assert hf.data.shape == (3, 2)
        assert hf.sample(0.5, 0.5) == 0.0
        assert hf.sample(2.5, 0.5) == 2.0
        assert hf.sample(0.5, 1.5) == 10.0
        assert hf.sample(2.5, 1.5) == 12.0
        assert abs(hf.sample(1.5, 1.0) - 6.0) < 1e-12

    def test_normal_tilts_against_slope(self, tmp_path):
        path = tmp_path / "terrain.asc"
        path.write_text(_ASC)
        hf = load_heightfield(path)
        n = hf.normal(1.5, 0.5)
        assert n[2] > 0
        assert n[0] < 0, "surface rises with x, normal leans back"
        assert abs(np.linalg.norm(n) - 1.0) < 1e-12

    def test_nodata_rejected(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_text(_ASC.replace("cellsize 1.0",
                                     "cellsize 1.0\nNODATA_value -9999")
                        .replace("11", "-9999"))
        with pytest.raises(ConfigError, match="NODATA"):
            load_heightfield(path)

    def test_wrong_value_count(self, tmp_path):
        path = tmp_path / "short.asc"
        path.write_text(_ASC.rsplit(" ", 1)[0] + "\n")
        with pytest.raises(ConfigError, match="expected 6 elevation values"):
            load_heightfield(path)

    def test_missing_header_field(self, tmp_path):
        path = tmp_path / "nohdr.asc"
        path.write_text(_ASC.replace("cellsize 1.0\n", ""))
        with pytest.raises(ConfigError, match="cellsize"):
            load_heightfield(path)

    def test_too_small_grid(self, tmp_path):
        path = tmp_path / "thin.asc"
        path.write_text("ncols 3\nnrows 1\nxllcorner 0\nyllcorner 0\n"
                        "cellsize 1.0\n1 2 3\n")
        with pytest.raises(ConfigError, match="at least 2x2"):
            load_heightfield(path)

    def test_non_numeric_value(self, tmp_path):
        path = tmp_path / "junk.asc"
        path.write_text(_ASC.replace("11", "eleven"))
        with pytest.raises(ConfigError, match="malformed elevation"):
            load_heightfield(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_heightfield(tmp_path / "absent.asc")

    def test_config_with_heightfield_round_trip(self, tmp_path):
        (tmp_path / "terrain.asc").write_text(_ASC)
        doc = _base_doc()
        doc["boundaries"] = [{"type": "heightfield", "path": "terrain.asc",
                              "friction_coeff": 0.3}]
        path = tmp_path / "scene.yaml"
        path.write_text(yaml.safe_dump(doc))
        sc = load_config(path)
        assert sc.boundaries[0].kind == "heightfield"
        assert sc.boundaries[0].heightfield.sample(0.5, 0.5) == 0.0
        save_config(tmp_path / "echo.yaml", sc)
        sc2 = load_config(tmp_path / "echo.yaml")
        assert sc2.to_dict() == sc.to_dict()


class TestParticleCSV:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(80)
        ps = ParticleSet.from_samples(rng.uniform(size=(37, 3)),
                                      np.full(37, 1e-6), 1000.0, 0)
        ps.v[:] = rng.normal(size=(37, 3))
        path = tmp_path / "frame.csv"
        write_particles(path, ps)
        pos, vel = read_particles(path)
        assert np.array_equal(pos, ps.x), "positions must survive bit-exact"
        assert np.array_equal(vel, ps.v)

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "frame.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ConfigError, match="header"):
            read_particles(path)

    def test_empty_set(self, tmp_path):
        ps = ParticleSet.from_samples(np.zeros((0, 3)), np.zeros(0), 1.0, 0)
        path = tmp_path / "empty.csv"
        write_particles(path, ps)
        pos, vel = read_particles(path)
        assert pos.shape == (0, 3) and vel.shape == (0, 3)


SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


class TestShippedScenarios:
    @pytest.mark.parametrize("stem", ["sliding_box", "granular_collapse",
                                      "localized_flow", "terrain_demo"])
    def test_loads_and_seeds(self, stem):
        sc = load_config(SCENARIO_DIR / f"{stem}.yaml")
        assert sc.name == stem
        ps = build_particles(sc)
        assert ps.n > 0
        assert np.all(ps.x > sc.sim.domain_min)
        assert np.all(ps.x < sc.sim.domain_max)

    def test_sliding_box_geometry(self):
        from sparsempm.bench import slide_geometry

        sc = load_config(SCENARIO_DIR / "sliding_box.yaml")
        theta_deg, mu, gmag, downslope = slide_geometry(sc)
        assert abs(theta_deg - 30.0) < 1e-9
        assert mu == 0.268
        assert abs(gmag - 9.81) < 1e-9
        assert np.allclose(downslope, [-1.0, 0.0, 0.0], atol=1e-12)
        assert build_particles(sc).n == 1728

    def test_localized_flow_domain_dwarfs_material(self):
        sc = load_config(SCENARIO_DIR / "localized_flow.yaml")
        domain = np.prod(sc.sim.domain_max - sc.sim.domain_min)
        region = np.prod(sc.materials[0].region_max
                         - sc.materials[0].region_min)
        assert domain / region > 1e4

    def test_terrain_demo_bowl(self):
        sc = load_config(SCENARIO_DIR / "terrain_demo.yaml")
        hf = sc.boundaries[0].heightfield
        assert hf.sample(0.0, 0.0) == 0.0, "bowl bottom sits at z = 0"
        assert hf.sample(1.0, 1.0) > 0.25, "rim rises towards the corners"


class TestMetricsCSV:
    def test_round_trip_with_summary(self, tmp_path):
        rows = [{"row_kind": "step", "step": 1, "t_s": repr(0.001)},
                {"row_kind": "step", "step": 2, "t_s": repr(0.002)}]
        summary = {"row_kind": "summary", "step": 2, "speedup": repr(3.5)}
        path = tmp_path / "metrics.csv"
        write_metrics(path, rows, summary)
        got_rows, got_summary = read_metrics(path)
        assert len(got_rows) == 2
        assert got_rows[0]["step"] == "1"
        assert float(got_rows[1]["t_s"]) == 0.002
        assert got_summary is not None
        assert float(got_summary["speedup"]) == 3.5

    def test_without_summary(self, tmp_path):
        rows = [{"row_kind": "step", "step": 1}]
        path = tmp_path / "metrics.csv"
        write_metrics(path, rows)
        got_rows, got_summary = read_metrics(path)
        assert len(got_rows) == 1 and got_summary is None
