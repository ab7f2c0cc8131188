"""Backend selection: compiled kernels when available, NumPy otherwise.

Set ``CONVDEF_BACKEND=reference`` to force the fallback (the benchmark does
this to compare the two) or ``CONVDEF_BACKEND=compiled`` to fail loudly if
the extension is missing. Results are reproducible bit for bit within a
backend; across backends they agree to floating-point reduction order.
"""

import os

from . import reference

_requested = os.environ.get("CONVDEF_BACKEND", "").lower()

if _requested == "reference":
    _impl = reference
    BACKEND = "reference"
else:
    try:
        from . import _fastkern as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = reference
        BACKEND = "reference"

obs_layer_stats = _impl.obs_layer_stats
latent_layer_stats = _impl.latent_layer_stats

__all__ = ["BACKEND", "obs_layer_stats", "latent_layer_stats", "reference"]
