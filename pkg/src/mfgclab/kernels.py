"""Backend selection for the coupling cost kernels.

The compiled extension is preferred when it imported cleanly; setting the
environment variable ``MFGCLAB_PURE`` (to anything non-empty) forces the
NumPy fallback.  Both backends expose the same two functions and agree to
floating-point roundoff.
"""

import os

from . import _coupling_py

if os.environ.get("MFGCLAB_PURE"):
    _impl = _coupling_py
    BACKEND = "python"
else:
    try:
        from . import _coupling_c as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _coupling_py
        BACKEND = "python"

coupling_cost_sorted = _impl.coupling_cost_sorted
coupling_cost_uniform = _impl.coupling_cost_uniform
