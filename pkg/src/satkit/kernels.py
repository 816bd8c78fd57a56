"""Lattice kernel backend selection.

Prefers the compiled extension, falls back to the numpy implementation when
the extension was not built. ``SATKIT_LATTICE_BACKEND`` overrides: "compiled"
(error if missing), "numpy", or "auto" (default).
"""

import os

from . import latfb_np

_requested = os.environ.get("SATKIT_LATTICE_BACKEND", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError("SATKIT_LATTICE_BACKEND must be auto, compiled or numpy, "
                     "got %r" % _requested)

_compiled = None
if _requested in ("auto", "compiled"):
    try:
        from . import _latfb as _compiled
    except ImportError:
        if _requested == "compiled":
            raise

if _compiled is not None:
    BACKEND = "compiled"
    forward_backward = _compiled.forward_backward
else:
    BACKEND = "numpy"
    forward_backward = latfb_np.forward_backward


def available_backends():
    """Name -> forward_backward callable for every importable backend."""
    out = {"numpy": latfb_np.forward_backward}
    try:
        from . import _latfb
        out["compiled"] = _latfb.forward_backward
    except ImportError:
        pass
    return out
