"""Backend dispatch for the hot kernels.

The numba backend is used when importable unless VOXREASON_BACKEND=numpy is
set (or numba is missing). Both backends are single-threaded and
run-to-run deterministic; they agree to float round-off.
"""

import os

from . import _kernels_np

_KERNEL_NAMES = [
    "trilinear_gather",
    "trilinear_scatter",
    "render_forward",
    "fit_photometric",
    "fit_features",
    "dda_first_hit",
    "conv3d_forward",
    "conv3d_backward",
    "l1_neighbors",
]

_requested = os.environ.get("VOXREASON_BACKEND", "auto").lower()

_kernels_nb = None
if _requested in ("auto", "numba"):
    try:
        from . import _kernels_nb
    except ImportError:
        if _requested == "numba":
            raise
        _kernels_nb = None

BACKEND = "numba" if _kernels_nb is not None else "numpy"
_active = _kernels_nb if _kernels_nb is not None else _kernels_np


def get_impl(name: str, backend: str):
    """Fetch a kernel from a specific backend (for tests and benchmarks)."""
    if backend == "numpy":
        return getattr(_kernels_np, name)
    if backend == "numba":
        if _kernels_nb is None:
            raise RuntimeError("numba backend unavailable")
        return getattr(_kernels_nb, name)
    raise ValueError(f"unknown backend {backend!r}")


def available_backends():
    out = ["numpy"]
    if _kernels_nb is not None:
        out.append("numba")
    return out


trilinear_gather = _active.trilinear_gather
trilinear_scatter = _active.trilinear_scatter
render_forward = _active.render_forward
fit_photometric = _active.fit_photometric
fit_features = _active.fit_features
dda_first_hit = _active.dda_first_hit
conv3d_forward = _active.conv3d_forward
conv3d_backward = _active.conv3d_backward
l1_neighbors = _active.l1_neighbors
