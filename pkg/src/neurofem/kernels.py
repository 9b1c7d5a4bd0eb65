"""Backend selection for the simulation inner loops.

The compiled extension is used when it imports; otherwise the numpy
implementation. Setting ``NEUROFEM_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

python_backend = _pykernels

try:
    if os.environ.get("NEUROFEM_BACKEND", "").lower() == "python":
        raise ImportError("compiled backend disabled by NEUROFEM_BACKEND")
    from . import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"


def get_backend(name: str | None = None):
    """``None`` or "auto" for the default, "python" or "compiled" explicitly."""
    if name in (None, "auto"):
        return backend
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled extension is not built; run `pip install -e . --no-build-isolation`")
        return compiled_backend
    raise ValueError(f"unknown backend {name!r}")
