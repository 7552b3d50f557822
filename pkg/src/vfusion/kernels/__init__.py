"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set VF_WORKERS to control the compiled backend's thread count (the numpy
backend is serial). Both backends are bit-identical by construction.
"""

from __future__ import annotations

import os

from . import _numpy

try:
    from . import _core as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _numpy
    BACKEND = "numpy"

sample_trilinear = _impl.sample_trilinear
trilinear_gradient = _impl.trilinear_gradient
integrate_projective = _impl.integrate_projective
dqb_warp = _impl.dqb_warp
raster_mesh = _impl.raster_mesh
splat_points = _impl.splat_points
set_num_threads = _impl.set_num_threads

numpy_backend = _numpy


def configure_workers(n: int | None = None) -> int:
    """Apply the worker count (argument, else VF_WORKERS, else 1)."""
    if n is None:
        n = int(os.environ.get("VF_WORKERS", "1"))
    set_num_threads(n)
    return n


configure_workers()
