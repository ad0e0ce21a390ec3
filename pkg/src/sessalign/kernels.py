"""Kernel backend selection.

The Cython extension is used when it was built; otherwise the NumPy fallback
is imported.  Setting ``SESSALIGN_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py as python_backend

try:
    if os.environ.get("SESSALIGN_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend forced")
    from . import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

ctc_forward_backward = _impl.ctc_forward_backward
edit_table = _impl.edit_table
