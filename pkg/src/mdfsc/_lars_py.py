"""Pure NumPy LARS-Lasso in Gram form.

Solves ``min_w 0.5 * ||f - D w||^2 + alpha * ||w||_1`` given only
``G = D.T @ D`` and ``c0 = D.T @ f``.  This module is the fallback used when
the compiled ``_lars_ext`` is unavailable; both implement the same homotopy,
step for step, so their outputs agree to rounding error.
"""

import numpy as np
from scipy.linalg import solve_triangular

FLAG_DEGENERATE = 1   # an entering atom was linearly dependent and skipped
FLAG_MAX_ITER = 2
FLAG_CAP = 4          # stopped at max_nonzeros before reaching alpha
FLAG_UNPOLISHED = 8   # final active-set refit flipped a sign; path value kept

_RANK_EPS = 1e-10


def _max_iter(n):
    return 500 + 10 * n


def _chol_append(L, G, active, j):
    """Cholesky factor of G[active+j, active+j] from that of G[active, active]."""
    k = len(active)
    gjj = G[j, j]
    if k == 0:
        if gjj <= _RANK_EPS:
            return None
        return np.array([[np.sqrt(gjj)]])
    v = solve_triangular(L, G[active, j], lower=True)
    diag2 = gjj - v @ v
    if diag2 <= _RANK_EPS * max(gjj, 1.0):
        return None
    out = np.zeros((k + 1, k + 1))
    out[:k, :k] = L
    out[k, :k] = v
    out[k, k] = np.sqrt(diag2)
    return out


def _chol_solve(L, b):
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L, y, lower=True, trans="T")


def lars_gram(G, c0, alpha, max_nonzeros=None, tol=1e-7):
    """Lasso solution for one target.  Returns ``(w, flags)``."""
    G = np.asarray(G, dtype=np.float64)
    c = np.array(c0, dtype=np.float64)
    n = c.shape[0]
    if max_nonzeros is None:
        max_nonzeros = n
    w = np.zeros(n)
    sign = np.zeros(n)
    active = []
    excluded = np.zeros(n, dtype=bool)
    L = None
    flags = 0
    C = 0.0
    stopped = False
    last_dropped = -1

    for _ in range(_max_iter(n)):
        if not active:
            cand = np.where(excluded, -1.0, np.abs(c))
            j = int(np.argmax(cand))
            C = cand[j]
            if C <= alpha or C <= 0.0:
                stopped = True
                break
            if max_nonzeros < 1:
                flags |= FLAG_CAP
                break
            L = _chol_append(None, G, active, j)
            if L is None:
                excluded[j] = True
                flags |= FLAG_DEGENERATE
                continue
            active.append(j)
            sign[j] = 1.0 if c[j] > 0 else -1.0
            continue

        s_a = sign[active]
        x = _chol_solve(L, s_a)
        a = G[:, active] @ x

        gamma = C - alpha
        event = 0  # 0 stop, 1 join, 2 drop
        pick = -1
        inactive = np.ones(n, dtype=bool)
        inactive[active] = False
        inactive &= ~excluded
        for j in np.flatnonzero(inactive):
            cj, aj = c[j], a[j]
            # a just-dropped atom sits at |c_j| == C; only the opposite sign may re-enter
            den = 1.0 - aj
            if den > tol and not (j == last_dropped and cj > 0):
                g = (C - cj) / den
                if 0.0 < g < gamma:
                    gamma, event, pick = g, 1, j
            den = 1.0 + aj
            if den > tol and not (j == last_dropped and cj < 0):
                g = (C + cj) / den
                if 0.0 < g < gamma:
                    gamma, event, pick = g, 1, j
        for p, i in enumerate(active):
            if x[p] != 0.0:
                g = -w[i] / x[p]
                if 0.0 < g < gamma:
                    gamma, event, pick = g, 2, p

        w[active] += gamma * x
        c -= gamma * a
        C -= gamma
        last_dropped = -1

        if event == 0:
            stopped = True
            break
        if event == 2:
            i = active.pop(pick)
            w[i] = 0.0
            sign[i] = 0.0
            last_dropped = i
            if active:
                L = np.linalg.cholesky(G[np.ix_(active, active)])
            continue
        if len(active) >= max_nonzeros:
            flags |= FLAG_CAP
            break
        L_new = _chol_append(L, G, active, pick)
        if L_new is None:
            excluded[pick] = True
            flags |= FLAG_DEGENERATE
            continue
        L = L_new
        active.append(pick)
        sign[pick] = 1.0 if c[pick] > 0 else -1.0
    else:
        flags |= FLAG_MAX_ITER

    if stopped and active:
        s_a = sign[active]
        z = _chol_solve(L, np.asarray(c0, dtype=np.float64)[active] - alpha * s_a)
        if np.all(z * s_a > 0):
            w[active] = z
        else:
            flags |= FLAG_UNPOLISHED
    return w, flags


def lars_gram_batch(G, C0, alpha, max_nonzeros=None, tol=1e-7):
    """Row-wise :func:`lars_gram` over ``C0`` of shape (m, n)."""
    C0 = np.asarray(C0, dtype=np.float64)
    W = np.zeros_like(C0)
    flags = np.zeros(C0.shape[0], dtype=np.int32)
    for r in range(C0.shape[0]):
        W[r], flags[r] = lars_gram(G, C0[r], alpha, max_nonzeros, tol)
    return W, flags
