"""Kernel backend selection.

The normal-equation assembly dominates solver runtime, so it exists twice:
a Cython extension (built at install time) and a numpy fallback. The compiled
kernel is picked automatically when importable; set SE3FLOW_BACKEND=numpy or
=native to force a choice (native raises if the extension is missing).

Both backends implement the same contract; they agree to ~1e-12 relative
(not bitwise: vectorized and scalar libm exp differ in the last ulp).
"""

import os

from . import numpy_backend

_requested = os.environ.get("SE3FLOW_BACKEND", "").strip().lower()
if _requested not in ("", "native", "numpy"):
    raise ImportError(f"SE3FLOW_BACKEND must be 'native' or 'numpy', got {_requested!r}")

native = None
if _requested != "numpy":
    try:
        from . import _native as native
    except ImportError:
        native = None
if _requested == "native" and native is None:
    raise ImportError("SE3FLOW_BACKEND=native but the compiled kernel is not importable")

if native is not None:
    backend_name = "native"
    assemble_normal_equations = native.assemble_normal_equations
else:
    backend_name = "numpy"
    assemble_normal_equations = numpy_backend.assemble_normal_equations
