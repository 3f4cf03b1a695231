"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the NumPy
fallback. Setting ``SDEQUIV_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("SDEQUIV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

return_to_go = _impl.return_to_go
interp_weights = _impl.interp_weights

__all__ = ["BACKEND", "return_to_go", "interp_weights"]
