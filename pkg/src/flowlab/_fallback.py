"""Pure numpy implementations of the hot kernels.

These are the reference versions used when the compiled extension is not
available (or when ``FLOWLAB_PURE_PYTHON=1``). The Cython module in
``_kernels.pyx`` exposes the same functions with the same signatures.
"""

import numpy as np


def im2col(x, k, pad):
    """Unfold ``x`` of shape (B, C, H, W) into (B*H_out*W_out, C*k*k) patches.

    Stride is fixed at 1. Rows are ordered (b, i, j), columns (c, di, dj).
    """
    B, C, H, W = x.shape
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((B, Ho, Wo, C, k, k), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, :, di, dj] = xp[:, :, di:di + Ho, dj:dj + Wo].transpose(0, 2, 3, 1)
    return cols.reshape(B * Ho * Wo, C * k * k)


def col2im(cols, shape, k, pad):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to an image."""
    B, C, H, W = shape
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + Ho, dj:dj + Wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def _sq_dists(x, y):
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def rbf_pair_sums(x, y, bandwidths, exclude_diagonal):
    """Sum of multi-bandwidth RBF kernel values over all pairs (x_i, y_j).

    Returns ``sum_{i,j} sum_b exp(-|x_i - y_j|^2 / (2 s_b^2))``. With
    ``exclude_diagonal`` the i == j terms are skipped (x and y must then be
    the same array).
    """
    total = 0.0
    n = x.shape[0]
    # Row blocks keep the distance matrix small.
    step = 512
    for start in range(0, n, step):
        d = _sq_dists(x[start:start + step], y)
        if exclude_diagonal:
            rows = np.arange(d.shape[0])
            d[rows, rows + start] = np.inf
        for s in bandwidths:
            total += np.exp(-d / (2.0 * s * s)).sum()
    return float(total)


def gaussian_kde(values, grid, bandwidth):
    """Gaussian KDE of 1-D ``values`` evaluated on ``grid``."""
    out = np.zeros(grid.shape[0], dtype=np.float64)
    step = max(1, 2_000_000 // max(grid.shape[0], 1))
    inv = 1.0 / bandwidth
    for start in range(0, values.shape[0], step):
        z = (grid[:, None] - values[None, start:start + step]) * inv
        out += np.exp(-0.5 * z * z).sum(1)
    return out * (inv / (np.sqrt(2.0 * np.pi) * values.shape[0]))
