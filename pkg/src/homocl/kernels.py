"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it has been built; set the
environment variable ``HOMOCL_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"

if os.environ.get("HOMOCL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        _ckernels = None
    else:
        BACKEND = "cython"
else:
    _ckernels = None


def _impl(name, backend=None):
    backend = backend or BACKEND
    if backend == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return getattr(_ckernels, name)
    return getattr(_kernels_py, name)


def im2col3x3(x, backend=None):
    x = np.ascontiguousarray(x)
    return _impl("im2col3x3", backend)(x)


def col2im3x3(cols, shape, backend=None):
    return _impl("col2im3x3", backend)(cols, tuple(shape))


def crop_resize(images, boxes, out_size, backend=None):
    images = np.ascontiguousarray(images)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    return _impl("crop_resize", backend)(images, boxes, int(out_size))


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])
