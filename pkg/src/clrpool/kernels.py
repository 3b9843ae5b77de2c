"""Kernel selection.

The compiled :mod:`clrpool._ckernel` is used when it was built; otherwise
the numpy kernel. Setting ``CLRPOOL_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernel

BACKEND = "python"
clr_eval = _pykernel.clr_eval

if not os.environ.get("CLRPOOL_PURE_PYTHON"):
    try:
        from . import _ckernel
    except ImportError:
        pass
    else:
        clr_eval = _ckernel.clr_eval
        BACKEND = "cython"

python_clr_eval = _pykernel.clr_eval

__all__ = ["BACKEND", "clr_eval", "python_clr_eval"]
