"""Pure numpy transducer forward-backward kernel.

Fallback for :mod:`satkit._latfb`; same contract, vectorized over lattice
anti-diagonals. Blank is always token 0. All dynamic programming runs in log
space with a finite sentinel (``LOG_ZERO``) standing in for minus infinity,
with absorbing add semantics.
"""

import numpy as np

from .autodiff import LOG_ZERO, LOG_ZERO_GUARD


def _logadd(a, b):
    m = np.maximum(a, b)
    out = m + np.log1p(np.exp(np.minimum(a, b) - m))
    return np.where(m <= LOG_ZERO_GUARD, LOG_ZERO, out)


def forward_backward(log_probs, targets):
    """Transducer loss, gradient and DP tables for one utterance.

    Args:
        log_probs: (T, U+1, K) float64 array of per-node log distributions.
        targets: (U,) int64 array of target token ids (no blanks).

    Returns:
        (loss, grad, alpha, beta) where loss is the negative log-likelihood,
        grad is d(loss)/d(log_probs) with the same shape, and alpha/beta are
        the (T, U+1) forward/backward tables.
    """
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    T, U1, K = lp.shape
    U = U1 - 1

    lp_blank = lp[:, :, 0]
    lp_label = lp[np.arange(T)[:, None], np.arange(U)[None, :], y[None, :]] if U else np.zeros((T, 0))

    alpha = np.full((T, U1), LOG_ZERO)
    alpha[0, 0] = 0.0
    for n in range(1, T + U):
        ts = np.arange(max(0, n - U), min(T - 1, n) + 1)
        us = n - ts
        tsm = np.maximum(ts - 1, 0)
        from_blank = alpha[tsm, us] + lp_blank[tsm, us]
        from_blank[ts == 0] = LOG_ZERO
        if U:
            usm = np.maximum(us - 1, 0)
            from_label = alpha[ts, usm] + lp_label[ts, usm]
            from_label[us == 0] = LOG_ZERO
        else:
            from_label = np.full(ts.shape, LOG_ZERO)
        alpha[ts, us] = _logadd(from_blank, from_label)

    # Ghost row/column turn the terminal blank into the uniform recurrence:
    # beta_g[T, U] = 0 is "finished".
    beta_g = np.full((T + 1, U1 + 1), LOG_ZERO)
    beta_g[T, U] = 0.0
    lpl_pad = np.full((T, U1), LOG_ZERO)
    if U:
        lpl_pad[:, :U] = lp_label
    for n in range(T + U - 1, -1, -1):
        ts = np.arange(max(0, n - U), min(T - 1, n) + 1)
        us = n - ts
        beta_g[ts, us] = _logadd(
            beta_g[ts + 1, us] + lp_blank[ts, us],
            beta_g[ts, us + 1] + lpl_pad[ts, us],
        )
    beta = beta_g[:T, :U1].copy()

    loss = -(alpha[T - 1, U] + lp_blank[T - 1, U])
    log_like = beta[0, 0]

    grad = np.zeros_like(lp)
    grad[:, :, 0] = -np.exp(alpha + lp_blank + beta_g[1:, :U1] - log_like)
    if U:
        occ_label = np.exp(alpha[:, :U] + lp_label + beta[:, 1:] - log_like)
        grad[np.arange(T)[:, None], np.arange(U)[None, :], y[None, :]] = -occ_label
    return float(loss), grad, alpha, beta
