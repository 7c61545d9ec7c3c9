# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, fabs, exp, M_PI

cnp.import_array()


cdef inline void _rq_fwd(double xv, const double[:] w, const double[:] h, const double[:] d,
                         double bound, double* yo, double* lo) noexcept nogil:
    cdef Py_ssize_t nb = w.shape[0], k
    cdef double x0 = -bound, y0 = -bound
    k = 0
    while k < nb - 1 and xv >= x0 + w[k]:
        x0 += w[k]
        y0 += h[k]
        k += 1
    cdef double wk = w[k], hk = h[k], dk = d[k], dk1 = d[k + 1]
    cdef double sk = hk / wk
    cdef double xi = (xv - x0) / wk
    cdef double t = xi * (1.0 - xi)
    cdef double den = sk + (dk1 + dk - 2.0 * sk) * t
    yo[0] = y0 + hk * (sk * xi * xi + dk * t) / den
    cdef double num = sk * sk * (dk1 * xi * xi + 2.0 * sk * t + dk * (1.0 - xi) * (1.0 - xi))
    lo[0] = log(num) - 2.0 * log(den)


cdef inline void _rq_inv(double yv, const double[:] w, const double[:] h, const double[:] d,
                         double bound, double* xo, double* lo) noexcept nogil:
    cdef Py_ssize_t nb = w.shape[0], k
    cdef double x0 = -bound, y0 = -bound
    k = 0
    while k < nb - 1 and yv >= y0 + h[k]:
        x0 += w[k]
        y0 += h[k]
        k += 1
    cdef double wk = w[k], hk = h[k], dk = d[k], dk1 = d[k + 1]
    cdef double sk = hk / wk
    cdef double dy = yv - y0
    cdef double c2 = dk1 + dk - 2.0 * sk
    cdef double a = hk * (sk - dk) + dy * c2
    cdef double b = hk * dk - dy * c2
    cdef double c = -sk * dy
    cdef double disc = b * b - 4.0 * a * c
    if disc < 0.0:
        disc = 0.0
    cdef double xi = (2.0 * c) / (-b - sqrt(disc))
    xo[0] = x0 + xi * wk
    cdef double t = xi * (1.0 - xi)
    cdef double den = sk + c2 * t
    cdef double num = sk * sk * (dk1 * xi * xi + 2.0 * sk * t + dk * (1.0 - xi) * (1.0 - xi))
    lo[0] = -(log(num) - 2.0 * log(den))


def rqs_forward(x, widths, heights, derivs, double bound):
    cdef const double[:] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] w = np.ascontiguousarray(widths, dtype=np.float64)
    cdef const double[:, :] h = np.ascontiguousarray(heights, dtype=np.float64)
    cdef const double[:, :] d = np.ascontiguousarray(derivs, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i
    out = np.empty(n)
    lad = np.zeros(n)
    cdef double[:] ov = out
    cdef double[:] lv = lad
    with nogil:
        for i in range(n):
            if fabs(xv[i]) > bound:
                ov[i] = xv[i]
            else:
                _rq_fwd(xv[i], w[i], h[i], d[i], bound, &ov[i], &lv[i])
    return out, lad


def rqs_inverse(y, widths, heights, derivs, double bound):
    cdef const double[:] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[:, :] w = np.ascontiguousarray(widths, dtype=np.float64)
    cdef const double[:, :] h = np.ascontiguousarray(heights, dtype=np.float64)
    cdef const double[:, :] d = np.ascontiguousarray(derivs, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0], i
    out = np.empty(n)
    lad = np.zeros(n)
    cdef double[:] ov = out
    cdef double[:] lv = lad
    with nogil:
        for i in range(n):
            if fabs(yv[i]) > bound:
                ov[i] = yv[i]
            else:
                _rq_inv(yv[i], w[i], h[i], d[i], bound, &ov[i], &lv[i])
    return out, lad


def mix2_logpdf(x, log_weights, means, covs):
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] lw = np.ascontiguousarray(log_weights, dtype=np.float64)
    cdef const double[:, :, :] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef const double[:, :, :] cv = np.ascontiguousarray(covs, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], nk = lw.shape[1], i, k
    out = np.empty(n)
    cdef double[:] ov = out
    ia = np.empty(nk)
    ib = np.empty(nk)
    ic = np.empty(nk)
    cst = np.empty(nk)
    cdef double[:] va = ia, vb = ib, vc = ic, vk = cst
    cdef double det, dx, dy, m, s, comp
    for k in range(nk):
        det = cv[k, 0, 0] * cv[k, 1, 1] - cv[k, 0, 1] * cv[k, 0, 1]
        va[k] = cv[k, 0, 0] / det
        vb[k] = cv[k, 0, 1] / det
        vc[k] = cv[k, 1, 1] / det
        vk[k] = -0.5 * log(det) - log(2.0 * M_PI)
    with nogil:
        for i in range(n):
            m = -1e308
            for k in range(nk):
                dx = xv[i, 0] - mu[i, k, 0]
                dy = xv[i, 1] - mu[i, k, 1]
                comp = lw[i, k] - 0.5 * (vc[k] * dx * dx - 2.0 * vb[k] * dx * dy + va[k] * dy * dy) + vk[k]
                if comp > m:
                    m = comp
            s = 0.0
            for k in range(nk):
                dx = xv[i, 0] - mu[i, k, 0]
                dy = xv[i, 1] - mu[i, k, 1]
                comp = lw[i, k] - 0.5 * (vc[k] * dx * dx - 2.0 * vb[k] * dx * dy + va[k] * dy * dy) + vk[k]
                s += exp(comp - m)
            ov[i] = m + log(s)
    return out
