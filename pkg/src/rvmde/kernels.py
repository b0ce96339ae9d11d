"""Backend selection for the raster kernels.

The compiled Cython module is used when it was built; otherwise, or when
``RVMDE_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""

import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("RVMDE_PURE_PYTHON", "") not in ("1", "true"):
    _impl = _compiled
    BACKEND = "cython"
else:
    _impl = _kernels_py
    BACKEND = "python"


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}") from None


def rasterize_min(cols, rows, depth, height, width):
    return _impl.rasterize_min(cols, rows, depth, height, width)


def fill_columns(cols, row_lo, row_hi, depth, height, width):
    return _impl.fill_columns(cols, row_lo, row_hi, depth, height, width)


def splat_mer(cols, rows, depth, height, width, inv_su2, inv_sv2, qmax, rad_u, rad_v):
    return _impl.splat_mer(cols, rows, depth, height, width, inv_su2, inv_sv2, qmax, rad_u, rad_v)
