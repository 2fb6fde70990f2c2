"""Compare the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are imported side by side regardless of REPFUSION_NO_NUMBA, so
one run times everything.  Results are also checked for agreement.
"""

import argparse
import time

import numpy as np

from repfusion import _kernels


def _time(fn, *args, repeat=5):
    fn(*args)  # warm-up, includes JIT compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((2048, 32))
    labels = rng.integers(0, 4, size=1024).astype(np.int64)
    return {
        "jacobi_svd": (np.ascontiguousarray(x),),
        "pairwise_distances": (np.ascontiguousarray(x[:512]),),
        "silhouette_samples": (np.ascontiguousarray(x[:1024]), labels, 4),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not _kernels._HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speed-up':>9s}")
    for name, inputs in cases(rng).items():
        nb, npy = _kernels.KERNELS[name]
        a, b = nb(*inputs), npy(*inputs)
        a, b = (a[1], b[1]) if isinstance(a, tuple) else (a, b)
        assert np.allclose(a, b, atol=1e-8), f"{name}: paths disagree"
        t_nb = _time(nb, *inputs, repeat=args.repeat)
        t_np = _time(npy, *inputs, repeat=args.repeat)
        print(f"{name:22s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
