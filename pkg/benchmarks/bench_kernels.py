"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--edges 200000] [--dim 64] [--repeat 5]

Prints best-of-N wall time per kernel and backend, the speedup, and
whether the two backends agree bit for bit.
"""
import argparse
import timeit

import numpy as np

from hetmp.kernels import _fallback

try:
    from hetmp.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n_nodes: int, n_edges: int, dim: int, fanout: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_nodes, dim)).astype(np.float32)
    src = rng.integers(0, n_nodes, n_edges)
    dst = np.sort(rng.integers(0, n_nodes, n_edges))
    w = rng.random(n_edges).astype(np.float32)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=n_nodes))]).astype(np.int64)
    targets = rng.choice(n_nodes, size=min(n_nodes, 4096), replace=False).astype(np.int64)
    keys = rng.random(n_edges)
    return {
        "spmm": lambda m: m.spmm(x, src, dst, w, n_nodes),
        "scatter_add_rows": lambda m: m.scatter_add_rows(x[src], dst, n_nodes),
        "edge_dot": lambda m: m.edge_dot(x, x, src, dst),
        "segment_sum": lambda m: m.segment_sum(w, dst, n_nodes),
        "sample_neighbors": lambda m: m.sample_neighbors(indptr, src, targets, fanout, keys),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=20_000)
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--fanout", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    print(f"{args.nodes} nodes, {args.edges} edges, dim {args.dim}, fanout {args.fanout}")
    print(f"{'kernel':18s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for name, run in cases(args.nodes, args.edges, args.dim, args.fanout).items():
        t_py = min(timeit.repeat(lambda: run(_fallback), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: run(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:18s} {1e3 * t_py:10.2f} {1e3 * t_c:10.2f} {t_py / t_c:7.1f}x  "
              f"{same(run(_fallback), run(_ckernels))}")


if __name__ == "__main__":
    main()
