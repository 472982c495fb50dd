"""Kernel backend selection.

The compiled Cython core is preferred when built; the numpy fallback is
always available. ``OKD_KERNELS`` forces a backend (``compiled``/``numpy``),
``OKD_THREADS`` sets the OpenMP lane count for the compiled core (default 1;
results are bitwise identical for any value).
"""

import os

import numpy as np


def _thread_count() -> int:
    raw = os.environ.get("OKD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


THREADS = _thread_count()

_choice = os.environ.get("OKD_KERNELS", "auto").strip().lower()

if _choice in ("auto", ""):
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        from . import _numpy as _impl

        BACKEND = "numpy"
elif _choice in ("compiled", "cython", "cy"):
    from . import _core as _impl

    BACKEND = "compiled"
elif _choice in ("numpy", "python", "py"):
    from . import _numpy as _impl

    BACKEND = "numpy"
else:
    raise ValueError(f"unrecognized OKD_KERNELS value: {_choice!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, dilation, padding):
    return _impl.conv2d_forward(_c(x), _c(w), _c(b), dilation, padding, THREADS)


def conv2d_backward_input(gout, w, dilation, padding, H, W):
    return _impl.conv2d_backward_input(_c(gout), _c(w), dilation, padding, H, W, THREADS)


def conv2d_backward_weight(gout, x, kh, kw, dilation, padding):
    return _impl.conv2d_backward_weight(_c(gout), _c(x), kh, kw, dilation, padding, THREADS)


def maxpool2d_forward(x, k, stride):
    return _impl.maxpool2d_forward(_c(x), k, stride, THREADS)


def maxpool2d_backward(gout, idx, k, stride, H, W):
    return _impl.maxpool2d_backward(_c(gout), idx, k, stride, H, W, THREADS)


def adaptive_avg_pool_forward(x, oh, ow):
    return _impl.adaptive_avg_pool_forward(_c(x), oh, ow, THREADS)


def adaptive_avg_pool_backward(gout, H, W):
    return _impl.adaptive_avg_pool_backward(_c(gout), H, W, THREADS)
