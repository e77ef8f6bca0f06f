# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LARS-Lasso in Gram form.

Step-for-step port of :mod:`mdfsc._lars_py`; see there for the algorithm.
The batch entry point releases the GIL so callers may shard rows across
threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef int FLAG_DEGENERATE = 1
cdef int FLAG_MAX_ITER = 2
cdef int FLAG_CAP = 4
cdef int FLAG_UNPOLISHED = 8
cdef double RANK_EPS = 1e-10


cdef inline void _fwd(const double* L, int ld, int k, const double* b, double* y) noexcept nogil:
    cdef int i, j
    cdef double s
    for i in range(k):
        s = b[i]
        for j in range(i):
            s -= L[i * ld + j] * y[j]
        y[i] = s / L[i * ld + i]


cdef inline void _bwd(const double* L, int ld, int k, const double* y, double* x) noexcept nogil:
    # solves L^T x = y
    cdef int i, j
    cdef double s
    for i in range(k - 1, -1, -1):
        s = y[i]
        for j in range(i + 1, k):
            s -= L[j * ld + i] * x[j]
        x[i] = s / L[i * ld + i]


cdef int _chol_full(const double* G, int n, const int* act, int k, double* L) noexcept nogil:
    cdef int i, j, p
    cdef double s
    for i in range(k):
        for j in range(i + 1):
            s = G[act[i] * n + act[j]]
            for p in range(j):
                s -= L[i * n + p] * L[j * n + p]
            if i == j:
                if s <= 0.0:
                    return -1
                L[i * n + i] = sqrt(s)
            else:
                L[i * n + j] = s / L[j * n + j]
    return 0


cdef int _chol_append(const double* G, int n, const int* act, int k, int j,
                      double* L, double* tmp) noexcept nogil:
    cdef double gjj = G[j * n + j]
    cdef double diag2, scale
    cdef int i
    if k == 0:
        if gjj <= RANK_EPS:
            return -1
        L[0] = sqrt(gjj)
        return 0
    for i in range(k):
        tmp[i] = G[act[i] * n + j]
    _fwd(L, n, k, tmp, tmp + n)
    diag2 = gjj
    for i in range(k):
        diag2 -= tmp[n + i] * tmp[n + i]
    scale = gjj if gjj > 1.0 else 1.0
    if diag2 <= RANK_EPS * scale:
        return -1
    for i in range(k):
        L[k * n + i] = tmp[n + i]
    L[k * n + k] = sqrt(diag2)
    return 0


cdef int _lars_one(const double* G, int n, const double* c0, double alpha,
                   int max_nonzeros, double tol, double* w,
                   double* c, double* sign, int* act, char* excluded,
                   double* L, double* x, double* a, double* tmp) noexcept nogil:
    cdef int flags = 0, k = 0, it, i, j, p, event, pick, last_dropped = -1
    cdef int max_iter = 500 + 10 * n
    cdef double C = 0.0, gamma, g, den, cj, aj, best
    cdef bint stopped = False, finished = False

    for i in range(n):
        w[i] = 0.0
        c[i] = c0[i]
        sign[i] = 0.0
        excluded[i] = 0

    for it in range(max_iter):
        if k == 0:
            j = -1
            best = -1.0
            for i in range(n):
                g = -1.0 if excluded[i] else (c[i] if c[i] >= 0 else -c[i])
                if g > best:
                    best = g
                    j = i
            C = best
            if C <= alpha or C <= 0.0:
                stopped = True
                finished = True
                break
            if max_nonzeros < 1:
                flags |= FLAG_CAP
                finished = True
                break
            if _chol_append(G, n, act, 0, j, L, tmp) != 0:
                excluded[j] = 1
                flags |= FLAG_DEGENERATE
                continue
            act[0] = j
            k = 1
            sign[j] = 1.0 if c[j] > 0 else -1.0
            continue

        for p in range(k):
            tmp[p] = sign[act[p]]
        _fwd(L, n, k, tmp, tmp + n)
        _bwd(L, n, k, tmp + n, x)
        for i in range(n):
            g = 0.0
            for p in range(k):
                g += G[i * n + act[p]] * x[p]
            a[i] = g

        gamma = C - alpha
        event = 0
        pick = -1
        for p in range(k):
            excluded[act[p]] |= 2
        for j in range(n):
            if excluded[j]:
                continue
            cj = c[j]
            aj = a[j]
            den = 1.0 - aj
            if den > tol and not (j == last_dropped and cj > 0):
                g = (C - cj) / den
                if 0.0 < g < gamma:
                    gamma = g
                    event = 1
                    pick = j
            den = 1.0 + aj
            if den > tol and not (j == last_dropped and cj < 0):
                g = (C + cj) / den
                if 0.0 < g < gamma:
                    gamma = g
                    event = 1
                    pick = j
        for p in range(k):
            excluded[act[p]] &= 1
            if x[p] != 0.0:
                g = -w[act[p]] / x[p]
                if 0.0 < g < gamma:
                    gamma = g
                    event = 2
                    pick = p

        for p in range(k):
            w[act[p]] += gamma * x[p]
        for i in range(n):
            c[i] -= gamma * a[i]
        C -= gamma
        last_dropped = -1

        if event == 0:
            stopped = True
            finished = True
            break
        if event == 2:
            i = act[pick]
            for p in range(pick, k - 1):
                act[p] = act[p + 1]
            k -= 1
            w[i] = 0.0
            sign[i] = 0.0
            last_dropped = i
            if k > 0:
                _chol_full(G, n, act, k, L)
            continue
        if k >= max_nonzeros:
            flags |= FLAG_CAP
            finished = True
            break
        if _chol_append(G, n, act, k, pick, L, tmp) != 0:
            excluded[pick] = 1
            flags |= FLAG_DEGENERATE
            continue
        act[k] = pick
        k += 1
        sign[pick] = 1.0 if c[pick] > 0 else -1.0

    if not finished:
        flags |= FLAG_MAX_ITER

    if stopped and k > 0:
        for p in range(k):
            tmp[p] = c0[act[p]] - alpha * sign[act[p]]
        _fwd(L, n, k, tmp, tmp + n)
        _bwd(L, n, k, tmp + n, x)
        for p in range(k):
            if x[p] * sign[act[p]] <= 0.0:
                flags |= FLAG_UNPOLISHED
                break
        if not (flags & FLAG_UNPOLISHED):
            for p in range(k):
                w[act[p]] = x[p]
    return flags


def lars_gram_batch(G, C0, double alpha, max_nonzeros=None, double tol=1e-7):
    """Row-wise Lasso solutions for correlations ``C0`` of shape (m, n).

    Returns ``(W, flags)`` with ``W`` of shape (m, n).
    """
    cdef double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[:, ::1] c0 = np.ascontiguousarray(np.atleast_2d(C0), dtype=np.float64)
    cdef int m = c0.shape[0], n = c0.shape[1]
    if g.shape[0] != n or g.shape[1] != n:
        raise ValueError(f"Gram matrix shape {G.shape} does not match n={n}")
    cdef int cap = n if max_nonzeros is None else max_nonzeros
    W_arr = np.zeros((m, n), dtype=np.float64)
    flags_arr = np.zeros(m, dtype=np.int32)
    cdef double[:, ::1] W = W_arr
    cdef int[::1] flags = flags_arr
    cdef int r
    if m == 0 or n == 0:
        return W_arr, flags_arr

    cdef double* dbuf = <double*> malloc(sizeof(double) * (n * n + 7 * n))
    cdef int* act = <int*> malloc(sizeof(int) * n)
    cdef char* excl = <char*> malloc(sizeof(char) * n)
    if dbuf == NULL or act == NULL or excl == NULL:
        free(dbuf); free(act); free(excl)
        raise MemoryError()
    cdef double* L = dbuf
    cdef double* c = dbuf + n * n
    cdef double* sgn = c + n
    cdef double* x = sgn + n
    cdef double* a = x + n
    cdef double* tmp = a + n  # 3n: rhs, forward result, spare
    try:
        with nogil:
            for r in range(m):
                flags[r] = _lars_one(&g[0, 0], n, &c0[r, 0], alpha, cap, tol, &W[r, 0],
                                     c, sgn, act, excl, L, x, a, tmp)
    finally:
        free(dbuf); free(act); free(excl)
    return W_arr, flags_arr
