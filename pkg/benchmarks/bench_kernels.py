"""Time the attention aggregation kernel: compiled Cython core vs numpy fallback.

    python benchmarks/bench_kernels.py [--nodes 2000] [--degree 8] [--dim 16] [--repeat 20]

Also checks that both backends agree to 1e-12 on the benchmark inputs.
"""
import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from hgwavenet import kernels
from hgwavenet.kernels import _fallback

try:
    from hgwavenet.kernels import _attention as _compiled
except ImportError:
    _compiled = None


def make_inputs(n, degree, dim, seed=0):
    rng = np.random.default_rng(seed)
    rows = np.repeat(np.arange(n), degree)
    cols = rng.integers(0, n, size=n * degree)
    a = sp.csr_matrix((rng.random(n * degree), (rows, cols)), shape=(n, n)) + sp.eye(n)
    a = sp.csr_matrix(a.multiply(1.0 / a.sum(axis=1)))
    a.sort_indices()
    u = rng.normal(size=(n, dim))
    s, t = rng.normal(size=n), rng.normal(size=n)
    return s, t, u, a.indptr.astype(np.int64), a.indices.astype(np.int64), np.log(a.data)


def bench(name, mod, args, g, repeat):
    fwd = lambda: mod.attention_forward(*args, 0.2)
    out, w, pre = fwd()
    bwd = lambda: mod.attention_backward(g, args[2], args[3], args[4], w, pre, 0.2)
    tf = min(timeit.repeat(fwd, number=1, repeat=repeat))
    tb = min(timeit.repeat(bwd, number=1, repeat=repeat))
    print(f"{name:8s} forward {tf * 1e3:8.3f} ms   backward {tb * 1e3:8.3f} ms")
    return (out, bwd()), tf + tb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--degree", type=int, default=8)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args()
    args = make_inputs(a.nodes, a.degree, a.dim)
    g = np.random.default_rng(1).normal(size=args[2].shape)
    print(f"nodes={a.nodes} nnz={len(args[4])} dim={a.dim} active backend={kernels.BACKEND}")
    ref, t_np = bench("numpy", _fallback, args, g, a.repeat)
    if _compiled is None:
        print("compiled kernel not built; only the fallback was timed")
        return
    got, t_cy = bench("cython", _compiled, args, g, a.repeat)
    err = max(np.abs(ref[0] - got[0]).max(), *(np.abs(x - y).max() for x, y in zip(ref[1], got[1])))
    print(f"max abs difference {err:.2e}; speedup x{t_np / t_cy:.1f}")
    if err > 1e-12:
        raise SystemExit("backends disagree")


if __name__ == "__main__":
    main()
