"""Selects the compiled or pure NumPy kernels at import time.

The compiled extensions (LARS solver, im2col/col2im) are preferred; set ``MDFSC_PURE_PYTHON=1`` to force
the NumPy fallback (useful for debugging and for the benchmark).
"""

import os

from . import _lars_py

BACKEND = "python"
lars_gram_batch = _lars_py.lars_gram_batch

if os.environ.get("MDFSC_PURE_PYTHON") != "1":
    try:
        from . import _conv_ext, _lars_ext  # noqa: F401
    except ImportError:  # not built; stay on the fallback
        pass
    else:
        BACKEND = "cython"
        lars_gram_batch = _lars_ext.lars_gram_batch

FLAG_DEGENERATE = _lars_py.FLAG_DEGENERATE
FLAG_MAX_ITER = _lars_py.FLAG_MAX_ITER
FLAG_CAP = _lars_py.FLAG_CAP
FLAG_UNPOLISHED = _lars_py.FLAG_UNPOLISHED
