"""Independent reference implementations used only by the tests.

Each oracle is written from the textbook definition with plain loops and
shares no code with the package.
"""

import numpy as np


def conv_naive(x, w, b):
    n, c, h, wd = x.shape
    out_c = w.shape[0]
    y = np.zeros((n, out_c, h, wd), dtype=np.float64)
    for bi in range(n):
        for o in range(out_c):
            for i in range(h):
                for j in range(wd):
                    acc = float(b[o])
                    for ci in range(c):
                        for kh in range(3):
                            for kw in range(3):
                                si, sj = i + kh - 1, j + kw - 1
                                if 0 <= si < h and 0 <= sj < wd:
                                    acc += float(w[o, ci, kh, kw]) * float(x[bi, ci, si, sj])
                    y[bi, o, i, j] = acc
    return y


def window_max(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for bi in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    y[bi, ci, i, j] = max(x[bi, ci, 2 * i + a, 2 * j + e] for a in (0, 1) for e in (0, 1))
    return y


def block_mean(x, f):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // f, w // f))
    for i in range(h // f):
        for j in range(w // f):
            y[:, :, i, j] = x[:, :, i * f:(i + 1) * f, j * f:(j + 1) * f].astype(np.float64).mean(axis=(2, 3))
    return y


def matmul_naive(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    y = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            y[i, o] = b[o] + sum(float(x[i, k]) * float(w[o, k]) for k in range(din))
    return y


def bilinear_sample(img, out_h, out_w):
    """Half-pixel-center bilinear resampling of a 2-D array, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = sy - y0, sx - x0
            out[i, j] = (img[y0, x0] * (1 - dy) * (1 - dx) + img[y0, x1] * (1 - dy) * dx
                         + img[y1, x0] * dy * (1 - dx) + img[y1, x1] * dy * dx)
    return out


def lasso_objective(D, f, w, alpha):
    r = f - D @ w
    return 0.5 * float(r @ r) + alpha * float(np.abs(w).sum())


def ista(D, f, alpha, iters=60000, tol=1e-13):
    """Accelerated proximal gradient (FISTA) with gradient-based restart.

    Stops when an iteration moves no coordinate by more than ``tol``.
    """
    G, c = D.T @ D, D.T @ f
    L = np.linalg.eigvalsh(G)[-1]
    if L <= 0:
        return np.zeros(D.shape[1])
    step, thr = 1.0 / L, alpha / L
    w = np.zeros(D.shape[1])
    z, t = w.copy(), 1.0
    for _ in range(iters):
        u = z - step * (G @ z - c)
        w_new = np.sign(u) * np.maximum(np.abs(u) - thr, 0.0)
        delta = w_new - w
        if np.max(np.abs(delta)) < tol:
            return w_new
        if (z - w_new) @ delta > 0:  # momentum points uphill: restart
            t = 1.0
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = w_new + ((t - 1) / t_new) * delta
        w, t = w_new, t_new
    return w


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def ap_sweep(scores, labels):
    """Step-wise AP: one threshold per distinct score, evaluated from scratch."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall, precision = tp / n_pos, tp / len(sel)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, x, eps):
    """Central finite differences of the scalar ``fn`` with respect to array ``x`` (in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g
