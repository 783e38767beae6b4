"""Compare the compiled packing kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--samples 2000] [--repeat 5]

Both implementations are timed on the same random corpus; outputs are checked
for equality before any timing is reported.
"""
import argparse
import time

import numpy as np

from reimts import _fallback, kernels


def corpus(n, rng, span=48.0, max_obs=300, max_vars=36):
    out = []
    for _ in range(n):
        V = int(rng.integers(1, max_vars + 1))
        m = int(rng.integers(1, max_obs + 1))
        t = rng.uniform(0, span, m)
        v = rng.integers(0, V, m)
        out.append((t, v, V))
    return out


def run(impl, data, P):
    for t, v, V in data:
        b = impl.time_buckets(t, 48.0 / P, P)
        impl.pack_slots(t, v, b, P, V)
        c = impl.count_buckets(t, v, P, V)
        impl.pack_slots(t, v, c, P, V)


def check(data, P):
    if kernels.BACKEND != "cython":
        return
    from reimts import _kernels

    for t, v, V in data[:200]:
        b = _kernels.time_buckets(t, 48.0 / P, P)
        assert np.array_equal(b, _fallback.time_buckets(t, 48.0 / P, P))
        c = _kernels.count_buckets(t, v, P, V)
        assert np.array_equal(c, _fallback.count_buckets(t, v, P, V))
        s1, l1 = _kernels.pack_slots(t, v, b, P, V)
        s2, l2 = _fallback.pack_slots(t, v, b, P, V)
        assert l1 == l2 and np.array_equal(s1, s2)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--subsamples", type=int, default=4)
    args = parser.parse_args()
    data = corpus(args.samples, np.random.default_rng(0))
    check(data, args.subsamples)
    impls = {"python": _fallback}
    if kernels.BACKEND == "cython":
        from reimts import _kernels

        impls["cython"] = _kernels
    else:
        print("compiled kernels unavailable; timing the fallback only")
    results = {name: best_of(lambda m=m: run(m, data, args.subsamples), args.repeat) for name, m in impls.items()}
    for name, sec in results.items():
        print(f"{name:>7}: {sec * 1e3:8.1f} ms for {args.samples} samples ({sec / args.samples * 1e6:.1f} us/sample)")
    if "cython" in results:
        print(f"speedup: {results['python'] / results['cython']:.1f}x")


if __name__ == "__main__":
    main()
