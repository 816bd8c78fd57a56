# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled transducer forward-backward kernel.

Contract mirrors :mod:`satkit.latfb_np`: same arguments, same return tuple,
log-space DP with the finite LOG_ZERO sentinel and blank fixed at token 0.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()

cdef double LOG_ZERO = -1.0e30
cdef double GUARD = -1.0e29


cdef inline double _logadd(double a, double b) noexcept nogil:
    cdef double m = a if a > b else b
    cdef double d
    if m <= GUARD:
        return LOG_ZERO
    d = (b if a > b else a) - m
    return m + log1p(exp(d))


def forward_backward(log_probs, targets):
    """Transducer loss, gradient and DP tables for one utterance.

    Same signature and semantics as ``satkit.latfb_np.forward_backward``.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] lp = \
        np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] y = \
        np.ascontiguousarray(targets, dtype=np.int64)
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t U1 = lp.shape[1]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u
    cdef cnp.int64_t k

    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] alpha = \
        np.full((T, U1), LOG_ZERO)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] beta = \
        np.full((T, U1), LOG_ZERO)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] grad = \
        np.zeros((T, U1, lp.shape[2]))

    cdef double from_blank, from_label, loss, log_like, down
    with nogil:
        alpha[0, 0] = 0.0
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    continue
                from_blank = alpha[t - 1, u] + lp[t - 1, u, 0] if t > 0 else LOG_ZERO
                from_label = alpha[t, u - 1] + lp[t, u - 1, y[u - 1]] if u > 0 else LOG_ZERO
                alpha[t, u] = _logadd(from_blank, from_label)

        beta[T - 1, U] = lp[T - 1, U, 0]
        for t in range(T - 1, -1, -1):
            for u in range(U, -1, -1):
                if t == T - 1 and u == U:
                    continue
                from_blank = beta[t + 1, u] + lp[t, u, 0] if t < T - 1 else LOG_ZERO
                from_label = beta[t, u + 1] + lp[t, u, y[u]] if u < U else LOG_ZERO
                beta[t, u] = _logadd(from_blank, from_label)

        loss = -(alpha[T - 1, U] + lp[T - 1, U, 0])
        log_like = beta[0, 0]

        for t in range(T):
            for u in range(U1):
                down = beta[t + 1, u] if t < T - 1 else (0.0 if u == U else LOG_ZERO)
                grad[t, u, 0] = -exp(alpha[t, u] + lp[t, u, 0] + down - log_like)
                if u < U:
                    k = y[u]
                    grad[t, u, k] = -exp(
                        alpha[t, u] + lp[t, u, k] + beta[t, u + 1] - log_like)
    return float(loss), np.asarray(grad), np.asarray(alpha), np.asarray(beta)
