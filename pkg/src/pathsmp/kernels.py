"""Backend selection for the delay-kernel loops.

The compiled extension is used when importable; set ``PATHSMP_PURE_PYTHON=1``
to force the NumPy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("PATHSMP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py


def _prep(ker, lags, w, arr):
    return (
        np.ascontiguousarray(ker, dtype=np.float64),
        np.ascontiguousarray(lags, dtype=np.int64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(arr, dtype=np.float64),
    )


def rho_apply(ker, lags, w, Z, k, impl=None):
    impl = impl or _impl
    return impl.rho_apply(*_prep(ker, lags, w, Z), int(k))


def rho_star_scatter(ker, lags, w, Q, k, impl=None):
    impl = impl or _impl
    return impl.rho_star_scatter(*_prep(ker, lags, w, Q), int(k))


def rho_star_gather(ker, lags, w, Q, k, impl=None):
    impl = impl or _impl
    return impl.rho_star_gather(*_prep(ker, lags, w, Q), int(k))


def available_backends():
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return out
