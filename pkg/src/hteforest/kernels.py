"""Backend selection for the hot per-node kernels.

The numba backend is used when it imports cleanly and the environment
variable ``HTEFOREST_NUMBA`` is not set to ``0``; otherwise the vectorized
NumPy fallback in ``_kernels_py`` is used.  Both backends implement the same
functions with the same decision logic; ``benchmarks/kernel_benchmark.py``
times them against each other.
"""

from __future__ import annotations

import os

from . import _kernels_py as numpy_backend

BACKEND_ENV_VAR = "HTEFOREST_NUMBA"

numba_backend = None
if os.environ.get(BACKEND_ENV_VAR, "1") != "0":
    try:
        from . import _kernels_jit as numba_backend  # noqa: F401
    except ImportError:
        numba_backend = None

_active = numba_backend if numba_backend is not None else numpy_backend
BACKEND = "numba" if numba_backend is not None else "numpy"

best_cut_scan_mob = _active.best_cut_scan_mob
best_cut_scan_cf = _active.best_cut_scan_cf
best_cut_scan_var = _active.best_cut_scan_var
route_points = _active.route_points
grow_reg_tree = _active.grow_reg_tree
grow_hte_tree = _active.grow_hte_tree

MAX_DEPTH_SENTINEL = numpy_backend.MAX_DEPTH_SENTINEL
