"""Kernel backend selection.

The compiled extension is preferred when present; the pure-numpy backend is
the fallback. Set CDA_KERNELS=python or CDA_KERNELS=cython to force one.
"""

import os

from . import pyops

_requested = os.environ.get("CDA_KERNELS", "auto").lower()

if _requested == "python":
    _impl = pyops
    BACKEND = "python"
elif _requested in ("auto", "cython"):
    try:
        from . import _cyops as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = pyops
        BACKEND = "python"
else:
    raise ValueError(f"CDA_KERNELS must be auto, python or cython, got {_requested!r}")

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward
band_scores_fwd = _impl.band_scores_fwd
band_scores_bwd = _impl.band_scores_bwd
band_softmax_fwd = _impl.band_softmax_fwd
band_softmax_bwd = _impl.band_softmax_bwd
band_wsum_fwd = _impl.band_wsum_fwd
band_wsum_bwd = _impl.band_wsum_bwd


def available_backends():
    """Map backend name -> kernel module, for tests and benchmarks."""
    out = {"python": pyops}
    try:
        from . import _cyops

        out["cython"] = _cyops
    except ImportError:
        pass
    return out
