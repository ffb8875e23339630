"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise
the numpy versions in ``_pykernels`` are used. Setting the environment
variable ``SALIENCE_FILTER_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("SALIENCE_FILTER_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

BACKENDS = {"python": _pykernels}
try:
    from . import _ckernels

    BACKENDS["cython"] = _ckernels
except ImportError:
    pass


def _conv_impl(k):
    # 1x1 kernels are plain matrix products, where numpy's BLAS beats the loops
    return _pykernels if k.shape[2:] == (1, 1) else _impl


def conv2d_forward(x, k, groups):
    return _conv_impl(k).conv2d_forward(np.ascontiguousarray(x, dtype=np.float64),
                                np.ascontiguousarray(k, dtype=np.float64), int(groups))


def conv2d_backward(x, k, gout, groups):
    return _conv_impl(k).conv2d_backward(np.ascontiguousarray(x, dtype=np.float64),
                                 np.ascontiguousarray(k, dtype=np.float64),
                                 np.ascontiguousarray(gout, dtype=np.float64), int(groups))


def nms(corners, scores, threshold):
    corners = np.ascontiguousarray(corners, dtype=np.float64).reshape(-1, 4)
    return _impl.nms(corners, np.asarray(scores, dtype=np.float64), float(threshold))


def salience_map(xs, ys, boxes):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _impl.salience_map(np.ascontiguousarray(xs, dtype=np.float64),
                              np.ascontiguousarray(ys, dtype=np.float64), boxes)
