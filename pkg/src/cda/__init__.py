"""Treatment-aware time-series forecasting with causal domain adaptation.

A library and CLI for position-wise treatment-effect estimation,
answer-based attention reconstruction, adversarial domain alignment and
counterfactual policy ranking, verified against a built-in structural
simulator with exact counterfactual oracles.
"""

import os

# Desk-scale matrices gain nothing from threaded BLAS, and the numpy and
# scipy builds each ship their own OpenBLAS whose spinning worker pools
# oversubscribe small machines. Graphs are single-threaded by design;
# run-level parallelism happens across processes (eval --jobs).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(1, "blas")
except Exception:  # pragma: no cover - best effort when threadpoolctl is absent
    pass

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
