"""Compiled kernels vs. the numpy fallback.

Checks both backends agree, then times each kernel at a few problem sizes.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 1000 10000 40000]
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from flowppf import _kernels_py as py_k
from flowppf.flow import spline_create

try:
    from flowppf import _ckernels as c_k
except ImportError:  # extension not built
    c_k = None


def spline_inputs(n: int, bins: int = 8, bound: float = 4.0, seed: int = 0):
    rng = np.random.default_rng(seed)
    w, h, d = spline_create(rng.standard_normal((n, 3 * bins - 1)), bound)
    x = rng.uniform(-1.1 * bound, 1.1 * bound, n)
    return x, w.value, h.value, d.value, bound


def mixture_inputs(n: int, k: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    logw = np.log(rng.dirichlet(np.ones(k), size=n))
    means = rng.standard_normal((n, k, 2))
    a = rng.standard_normal((k, 2, 2))
    covs = a @ np.swapaxes(a, 1, 2) + 0.5 * np.eye(2)
    return x, logw, means, covs


def bench(n: int, repeat: int) -> dict:
    cases = {
        "rqs_forward": spline_inputs(n),
        "rqs_inverse": spline_inputs(n),
        "mix2_logpdf": mixture_inputs(n),
    }
    out = {}
    for name, args in cases.items():
        row = {}
        ref = getattr(py_k, name)(*args)
        row["python_s"] = min(timeit.repeat(lambda: getattr(py_k, name)(*args), number=1, repeat=repeat))
        if c_k is not None:
            got = getattr(c_k, name)(*args)
            ref_t = ref if isinstance(ref, tuple) else (ref,)
            got_t = got if isinstance(got, tuple) else (got,)
            row["max_abs_diff"] = float(max(np.max(np.abs(a - b)) for a, b in zip(ref_t, got_t)))
            row["cython_s"] = min(timeit.repeat(lambda: getattr(c_k, name)(*args), number=1, repeat=repeat))
            row["speedup"] = row["python_s"] / row["cython_s"]
        out[name] = row
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 40000])
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args()
    results = {n: bench(n, args.repeat) for n in args.sizes}
    if args.json:
        print(json.dumps(results, indent=2))
        return
    if c_k is None:
        print("compiled extension not available; timing the numpy path only")
    print(f"{'kernel':<13}{'n':>8}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}{'max|diff|':>11}")
    for n, rows in results.items():
        for name, r in rows.items():
            c = f"{1e3 * r['cython_s']:>11.3f}{r['speedup']:>9.1f}{r['max_abs_diff']:>11.1e}" if "cython_s" in r else ""
            print(f"{name:<13}{n:>8}{1e3 * r['python_s']:>11.3f}{c}")


if __name__ == "__main__":
    main()
