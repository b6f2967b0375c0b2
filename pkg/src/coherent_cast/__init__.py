"""Hierarchical time-series forecasting with coherent outputs.

Tree-structured feature fusion over per-node recurrent features, closed-form
and QP-based reconciliation, and a differentiable decision layer.
"""

import os as _os

# BLAS pools read these once, when numpy is first imported.
_threads = _os.environ.get("COHERENT_CAST_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
