"""NumPy reference implementations of the hot kernels.

These are the fallback when the compiled ``_ckernels`` module is missing,
and the oracle the compiled versions are tested against.
"""

import numpy as np


def return_to_go(costs, gamma):
    """Discounted reverse cumulative sum along the last axis.

    ``out[i, t] = sum_{s >= t} gamma**(s - t) * costs[i, s]``
    """
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    out = np.empty_like(costs)
    acc = np.zeros(costs.shape[0])
    for t in range(costs.shape[1] - 1, -1, -1):
        acc = costs[:, t] + gamma * acc
        out[:, t] = acc
    return out


def interp_weights(points, lo, step, n):
    """Multilinear interpolation stencil on a uniform tensor grid.

    Points outside the grid are clamped to the boundary, and the
    derivative along a clamped axis is zero.

    Parameters
    ----------
    points : (m, d) array
    lo, step : (d,) arrays
        Lower corner and spacing of each axis.
    n : (d,) int array
        Node count per axis (at least 2).

    Returns
    -------
    idx : (m, 2**d) int64
        Flat C-order node indices of the cell corners.
    w : (m, 2**d)
        Interpolation weights (nonnegative, summing to one).
    dw : (m, 2**d, d)
        Derivatives of the weights with respect to the point coordinates.
    clamped : (m,) bool
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    m, d = points.shape
    n = np.asarray(n, dtype=np.int64)
    p = (points - lo) / step
    low = p < 0.0
    high = p > (n - 1)
    p = np.where(low, 0.0, np.where(high, (n - 1).astype(np.float64), p))
    cell = np.minimum(np.floor(p).astype(np.int64), n - 2)
    frac = p - cell
    clamp_axis = low | high
    slope = np.where(clamp_axis, 0.0, 1.0 / step)

    ncorner = 1 << d
    idx = np.empty((m, ncorner), dtype=np.int64)
    w = np.empty((m, ncorner))
    dw = np.empty((m, ncorner, d))
    strides = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * n[a + 1]
    for c in range(ncorner):
        bits = [(c >> (d - 1 - a)) & 1 for a in range(d)]
        flat = np.zeros(m, dtype=np.int64)
        for a in range(d - 1, -1, -1):
            flat += (cell[:, a] + bits[a]) * strides[a]
        idx[:, c] = flat
        wc = np.ones(m)
        for a in range(d):
            wc = wc * (frac[:, a] if bits[a] else (1.0 - frac[:, a]))
        w[:, c] = wc
        for a in range(d):
            dwc = np.ones(m)
            for b in range(d):
                if b == a:
                    dwc = dwc * (slope[:, a] if bits[a] else -slope[:, a])
                elif bits[b]:
                    dwc = dwc * frac[:, b]
                else:
                    dwc = dwc * (1.0 - frac[:, b])
            dw[:, c, a] = dwc
    return idx, w, dw, clamp_axis.any(axis=1)
