"""Hot-kernel backend selection.

The compiled Cython extension is preferred when it imports cleanly; the
pure-numpy fallback is always available. Selection can be forced with the
environment variable ``FRUSTUMFUSION_KERNELS`` set to ``auto`` (default),
``compiled`` or ``python``. Forward kernels of the two backends are
bit-identical; gradient kernels agree to float round-off (see
tests/test_kernels.py and benchmarks/bench_kernels.py).
"""

import os

from . import numpy_backend

_choice = os.environ.get("FRUSTUMFUSION_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(
        f"FRUSTUMFUSION_KERNELS must be auto|compiled|python, got {_choice!r}")

active = numpy_backend
BACKEND = "python"
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels
        active = _ckernels
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _ckernels = None
else:
    _ckernels = None


def get_backend(name=None):
    """Return a backend module by name ('compiled', 'python' or None for the
    active one). Raises if the compiled backend was requested but missing."""
    if name is None:
        return active
    if name == "python":
        return numpy_backend
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernel backend is not available")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
