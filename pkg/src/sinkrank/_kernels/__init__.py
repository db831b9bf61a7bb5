"""Kernel backend selection.

The compiled Cython kernel is used when it was built and SINKRANK_PURE
is not set; otherwise the vectorized NumPy reference takes over.  Both
implement the same update ordering and stopping rule. Set the
environment variable before the first import to force the fallback.
"""

import os

from . import reference

_BACKEND = "numpy"
_IMPL = reference

if not os.environ.get("SINKRANK_PURE"):
    try:
        from . import _logcore as _compiled

        _IMPL = _compiled
        _BACKEND = "compiled"
    except ImportError:
        pass

log_solve_batch = _IMPL.log_solve_batch
softmin_last = reference.softmin_last


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'numpy'."""
    return _BACKEND


def available_backends() -> dict:
    """Map of importable backend name -> its log_solve_batch callable."""
    out = {"numpy": reference.log_solve_batch}
    try:
        from . import _logcore

        out["compiled"] = _logcore.log_solve_batch
    except ImportError:
        pass
    return out
