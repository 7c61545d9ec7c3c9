"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``FLOWPPF_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("FLOWPPF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

rqs_forward = _impl.rqs_forward
rqs_inverse = _impl.rqs_inverse
mix2_logpdf = _impl.mix2_logpdf
