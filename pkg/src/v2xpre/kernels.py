"""Hot-kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``V2XPRE_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from v2xpre import _kernels_py

NO_HIT = _kernels_py.NO_HIT
GROUND = _kernels_py.GROUND

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("V2XPRE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from v2xpre import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

raycast = _impl.raycast
chamfer_nn = _impl.chamfer_nn
convex_intersection_area = _impl.convex_intersection_area
rect_intersection_areas = _impl.rect_intersection_areas
