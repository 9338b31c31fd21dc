"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_fallback`` are used. Setting ``FLOWLAB_PURE_PYTHON=1``
forces the fallback. ``rbf_pair_sums`` always takes the numpy path, which
is faster than the compiled loop (see ``benchmarks/bench_kernels.py``).
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("FLOWLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), k, pad)


def col2im(cols: np.ndarray, shape, k: int, pad: int) -> np.ndarray:
    return _impl.col2im(cols, tuple(shape), k, pad)


def rbf_pair_sums(x, y, bandwidths, exclude_diagonal: bool = False) -> float:
    # The BLAS-backed distance matrix in the fallback beats the compiled
    # loop at every size we measured, so it is used with either backend.
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return float(_fallback.rbf_pair_sums(x, y, [float(b) for b in bandwidths], bool(exclude_diagonal)))


def gaussian_kde(values, grid, bandwidth: float) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    grid = np.ascontiguousarray(grid, dtype=np.float64).ravel()
    return _impl.gaussian_kde(values, grid, float(bandwidth))
