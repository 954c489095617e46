"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
reference in ``_pykernels`` is used. Set ``SWINFE_PURE_PYTHON=1`` to force
the fallback.
"""
import os

from . import _pykernels

if os.environ.get("SWINFE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
iou_matrix = _impl.iou_matrix
nms_sorted = _impl.nms_sorted


def available_backends():
    """Map backend name -> kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
