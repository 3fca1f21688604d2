"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when ``WAVECORR_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""
import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("WAVECORR_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_forward(x, W, b, dilation, start=0):
    return _impl.conv_forward(_c(x), _c(W), _c(b), int(dilation), int(start))


def conv_backward(gout, x, W, dilation, start=0):
    return _impl.conv_backward(_c(gout), _c(x), _c(W), int(dilation), int(start))


def corr_forward(x, w, b):
    return _impl.corr_forward(_c(x), _c(w), float(b))


def corr_backward(gout, x, w):
    gx, gw, gb = _impl.corr_backward(_c(gout), _c(x), _c(w))
    return gx, gw, float(gb)


def backends():
    """Return every available ``(name, module)`` pair, compiled first."""
    out = []
    try:
        from . import _kernels as compiled  # type: ignore[attr-defined]
        out.append(("cython", compiled))
    except ImportError:
        pass
    out.append(("python", _kernels_py))
    return out


def set_backend(name: str) -> str:
    """Switch the active backend at run time; returns the previous name."""
    global _impl, BACKEND
    table = dict(backends())
    if name not in table:
        raise ValueError(f"backend {name!r} is not available; have {sorted(table)}")
    prev = BACKEND
    _impl, BACKEND = table[name], name
    return prev
