"""Kernel selection: compiled extension when importable, numpy otherwise.

``HYDROCASCADE_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

NAME = "python"
reach_step = _kernels_py.reach_step
thomas_solve = _kernels_py.thomas_solve

if not os.environ.get("HYDROCASCADE_PURE_PYTHON"):
    try:
        from . import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None
    if _ext is not None:
        NAME = "cython"
        reach_step = _ext.reach_step
        thomas_solve = _ext.thomas_solve


def available_backends():
    """Map of backend name -> module exposing ``reach_step``/``thomas_solve``."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        return out
    out["cython"] = _kernels
    return out
