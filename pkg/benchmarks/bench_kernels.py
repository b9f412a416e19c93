"""Compare the compiled and NumPy kernels on generated flow features.

    python3 benchmarks/bench_kernels.py [--flows 2000] [--repeat 5]

Times split search at the root, tree traversal, and a full tree fit with
each backend swapped in. Results of both backends are checked for equality.
"""
import argparse
import statistics
import time
from contextlib import contextmanager

import numpy as np

from ddx import _kernels, _pykernels
from ddx.cart import CRITERIA, fit_tree
from ddx.dataset import dataset_from_packets
from ddx.trafficgen import synthetic_packets

try:
    from ddx import _ckernels
except ImportError:
    _ckernels = None


@contextmanager
def backend(mod):
    saved = (_kernels.best_split, _kernels.apply_tree, _kernels.impurity)
    _kernels.best_split, _kernels.apply_tree, _kernels.impurity = mod.best_split, mod.apply_tree, mod.impurity
    try:
        yield
    finally:
        _kernels.best_split, _kernels.apply_tree, _kernels.impurity = saved


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), statistics.median(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", type=int, default=2000, help="total flows, split evenly between classes")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install --no-build-isolation -e .`")

    ds = dataset_from_packets(synthetic_packets(args.flows // 2, args.flows - args.flows // 2, seed=args.seed))
    X, y = np.ascontiguousarray(ds.X), np.ascontiguousarray(ds.y.astype(np.intp))
    k = len(ds.class_names)
    crit = CRITERIA["entropy"]
    print(f"{len(ds)} flows x {X.shape[1]} features, best of {args.repeat}")
    print(f"{'kernel':<14}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")

    results = {}
    for name, mod in (("python", _pykernels), ("cython", _ckernels)):
        with backend(mod):
            split = best_of(lambda: mod.best_split(X, y, k, crit, 2), args.repeat)
            tree = best_of(lambda: fit_tree(ds), args.repeat)
            m = tree[2]
            walk = best_of(lambda: mod.apply_tree(X, m.feature, m.threshold, m.left, m.right), args.repeat)
        results[name] = {"best_split": split, "fit_tree": tree, "apply_tree": walk}

    py, cy = results["python"], results["cython"]
    assert py["best_split"][2] == cy["best_split"][2], "backends disagree on the root split"
    assert np.array_equal(py["fit_tree"][2].feature, cy["fit_tree"][2].feature)
    assert np.array_equal(py["apply_tree"][2], cy["apply_tree"][2])
    for kernel in ("best_split", "apply_tree", "fit_tree"):
        a, b = py[kernel][0] * 1e3, cy[kernel][0] * 1e3
        print(f"{kernel:<14}{a:>12.2f}{b:>12.2f}{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
