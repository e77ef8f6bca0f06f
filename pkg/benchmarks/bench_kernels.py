"""Compiled kernels vs the pure NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--columns 200]

Times the batched LARS-Lasso solver (scoring-sized problems: 448-dim
features, 50 atoms) and the 3x3 im2col/col2im pair used by every
convolution, and checks that both backends agree.
"""
import argparse
import timeit

import numpy as np

from mdfsc import _lars_py, ndnum

try:
    from mdfsc import _conv_ext, _lars_ext
except ImportError:
    raise SystemExit("compiled extensions not built; run `pip install -e . --no-build-isolation`")


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def lars_problem(d, n, m, seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((d, n))
    D /= np.linalg.norm(D, axis=0)
    F = rng.standard_normal((d, m)) * 3
    return D.T @ D, (D.T @ F).T


def bench_lars(args):
    G, C0 = lars_problem(448, 50, args.columns, args.seed)
    t_ext = _best(lambda: _lars_ext.lars_gram_batch(G, C0, 1.0), args.repeat)
    t_py = _best(lambda: _lars_py.lars_gram_batch(G, C0, 1.0), max(1, args.repeat // 2))
    W1, f1 = _lars_ext.lars_gram_batch(G, C0, 1.0)
    W2, f2 = _lars_py.lars_gram_batch(G, C0, 1.0)
    agree = float(np.max(np.abs(W1 - W2)))
    return f"lars ({args.columns} cols, d=448, n=50)", t_ext, t_py, f"max |dW| {agree:.1e}, flags equal {np.array_equal(f1, f2)}"


def bench_im2col(args):
    x = np.random.default_rng(args.seed).standard_normal((8, 16, 64, 64)).astype(np.float32)
    cols = ndnum._im2col_numpy(x)
    t_ext = _best(lambda: _conv_ext.col2im(_conv_ext.im2col(x), x.shape), args.repeat)
    t_py = _best(lambda: ndnum._col2im_numpy(ndnum._im2col_numpy(x), x.shape), args.repeat)
    same = np.array_equal(_conv_ext.im2col(x), cols) and \
        np.allclose(_conv_ext.col2im(cols, x.shape), ndnum._col2im_numpy(cols, x.shape), atol=1e-5)
    return "im2col+col2im (8x16x64x64 f32)", t_ext, t_py, f"outputs agree {same}"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--columns", type=int, default=200, help="feature columns per LARS batch")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"{'kernel':<34}{'compiled':>12}{'numpy':>12}{'speedup':>9}  check")
    for bench in (bench_lars, bench_im2col):
        name, t_ext, t_py, check = bench(args)
        print(f"{name:<34}{t_ext * 1e3:>10.2f}ms{t_py * 1e3:>10.2f}ms{t_py / t_ext:>8.1f}x  {check}")


if __name__ == "__main__":
    main()
