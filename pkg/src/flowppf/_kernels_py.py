"""Pure numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` exactly; used when the compiled extension is
unavailable or ``FLOWPPF_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np


def _knots(sizes: np.ndarray, bound: float) -> np.ndarray:
    k = np.zeros((sizes.shape[0], sizes.shape[1] + 1))
    np.cumsum(sizes, axis=1, out=k[:, 1:])
    k -= bound
    k[:, -1] = bound
    return k


def rqs_forward(x, widths, heights, derivs, bound):
    """Monotone rational-quadratic spline on [-bound, bound], identity outside.

    ``widths``/``heights``: (n, K) positive, each row summing to ``2*bound``;
    ``derivs``: (n, K+1) knot derivatives.  Returns ``(y, log|dy/dx|)``.
    """
    x = np.asarray(x, dtype=float)
    n, nb = widths.shape
    y = x.copy()
    lad = np.zeros(n)
    inside = np.abs(x) <= bound
    if not inside.any():
        return y, lad
    xi_all = x[inside]
    w, h, d = widths[inside], heights[inside], derivs[inside]
    cx, cy = _knots(w, bound), _knots(h, bound)
    rows = np.arange(len(xi_all))
    b = np.clip((xi_all[:, None] >= cx[:, 1:-1]).sum(axis=1), 0, nb - 1)
    x0, y0 = cx[rows, b], cy[rows, b]
    wk, hk = w[rows, b], h[rows, b]
    dk, dk1 = d[rows, b], d[rows, b + 1]
    sk = hk / wk
    xi = (xi_all - x0) / wk
    t = xi * (1.0 - xi)
    den = sk + (dk1 + dk - 2.0 * sk) * t
    y[inside] = y0 + hk * (sk * xi * xi + dk * t) / den
    num = sk * sk * (dk1 * xi * xi + 2.0 * sk * t + dk * (1.0 - xi) ** 2)
    lad[inside] = np.log(num) - 2.0 * np.log(den)
    return y, lad


def rqs_inverse(y, widths, heights, derivs, bound):
    """Inverse of ``rqs_forward``; returns ``(x, log|dx/dy|)``."""
    y = np.asarray(y, dtype=float)
    n, nb = widths.shape
    x = y.copy()
    lad = np.zeros(n)
    inside = np.abs(y) <= bound
    if not inside.any():
        return x, lad
    yi = y[inside]
    w, h, d = widths[inside], heights[inside], derivs[inside]
    cx, cy = _knots(w, bound), _knots(h, bound)
    rows = np.arange(len(yi))
    b = np.clip((yi[:, None] >= cy[:, 1:-1]).sum(axis=1), 0, nb - 1)
    x0, y0 = cx[rows, b], cy[rows, b]
    wk, hk = w[rows, b], h[rows, b]
    dk, dk1 = d[rows, b], d[rows, b + 1]
    sk = hk / wk
    dy = yi - y0
    c2 = dk1 + dk - 2.0 * sk
    a = hk * (sk - dk) + dy * c2
    bb = hk * dk - dy * c2
    c = -sk * dy
    disc = bb * bb - 4.0 * a * c
    xi = (2.0 * c) / (-bb - np.sqrt(np.maximum(disc, 0.0)))
    x[inside] = x0 + xi * wk
    t = xi * (1.0 - xi)
    den = sk + c2 * t
    num = sk * sk * (dk1 * xi * xi + 2.0 * sk * t + dk * (1.0 - xi) ** 2)
    lad[inside] = -(np.log(num) - 2.0 * np.log(den))
    return x, lad


def mix2_logpdf(x, log_weights, means, covs):
    """Log density of per-row 2-D Gaussian mixtures.

    ``x``: (n, 2); ``log_weights``: (n, K); ``means``: (n, K, 2);
    ``covs``: (K, 2, 2) shared across rows.
    """
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    dx = x[:, None, 0] - means[:, :, 0]
    dy = x[:, None, 1] - means[:, :, 1]
    q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    comp = log_weights - 0.5 * q - 0.5 * np.log(det) - np.log(2.0 * np.pi)
    m = comp.max(axis=1)
    return m + np.log(np.exp(comp - m[:, None]).sum(axis=1))
