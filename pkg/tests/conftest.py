"""Load the package before any test module can import numba directly:
the thread-count ceiling is fixed at numba import time, and the package
raises it above the container's advertised core count."""

import sparsempm  # noqa: F401
