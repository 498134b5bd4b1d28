"""Explicit APIC material point method on dense or sparse background grids.

The background grid can be built three ways: a dense allocation over the
declared domain, a scan-based sparse construction, or a hash-based sparse
construction.  All three produce the same compact active-node indexing, so
the transfer kernels are shared and results are interchangeable.
"""

import os

# Thread count is fixed at numba import time; raise the ceiling first so
# runs may request more workers than the container advertises.
if "NUMBA_NUM_THREADS" not in os.environ:
    _cpu = os.cpu_count() or 1
    os.environ["NUMBA_NUM_THREADS"] = str(max(_cpu, 16))
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .errors import (
    ConfigError,
    InactiveNodeError,
    KeyRangeError,
    SimulationError,
    SparseMpmError,
)
from .grid_index import (
    ActiveIndexMap,
    block_of,
    build_dense_grid,
    local_offset,
    mix64,
    node_index,
    pack_key,
    unpack_key,
)
from .sparse_scan import build_scan_sparse_grid, parallel_exclusive_scan
from .sparse_hash import BlockHashTable, build_hash_sparse_grid
from .materials import MaterialModel
from .solver import (
    BoundaryCondition,
    NodalFields,
    ParticleSet,
    SimConfig,
    Simulation,
    bspline_weights,
)
from .scenarios import load_config, load_heightfield, sample_box
from .bench import compare, run, sliding_box_oracle, sparsity_ratio

__version__ = "0.1.0"

__all__ = [
    "ActiveIndexMap",
    "BlockHashTable",
    "BoundaryCondition",
    "ConfigError",
    "InactiveNodeError",
    "KeyRangeError",
    "MaterialModel",
    "NodalFields",
    "ParticleSet",
    "SimConfig",
    "Simulation",
    "SimulationError",
    "SparseMpmError",
    "block_of",
    "bspline_weights",
    "build_dense_grid",
    "build_hash_sparse_grid",
    "build_scan_sparse_grid",
    "compare",
    "load_config",
    "load_heightfield",
    "local_offset",
    "mix64",
    "node_index",
    "pack_key",
    "parallel_exclusive_scan",
    "run",
    "sample_box",
    "sliding_box_oracle",
    "sparsity_ratio",
    "unpack_key",
]
