"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``LIDAR_SFM_NUMBA=0`` to force
the numpy implementations (useful for debugging or when numba is missing).
Both backends expose the same functions with the same signatures.
"""
import os

from . import _numpy as numpy_backend

numba_backend = None
if os.environ.get("LIDAR_SFM_NUMBA", "1").lower() not in ("0", "false", "no", "off"):
    try:
        from . import _numba as numba_backend
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba_backend = None

backend = numba_backend if numba_backend is not None else numpy_backend
BACKEND_NAME = "numba" if backend is numba_backend else "numpy"

carve_free = backend.carve_free
lookup_states = backend.lookup_states
accumulate_normal = backend.accumulate_normal
point_to_plane = backend.point_to_plane

__all__ = [
    "BACKEND_NAME",
    "accumulate_normal",
    "backend",
    "carve_free",
    "lookup_states",
    "numba_backend",
    "numpy_backend",
    "point_to_plane",
]
