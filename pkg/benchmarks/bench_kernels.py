"""Compare the compiled kernel extension against the numpy reference.

Checks bitwise agreement first, then reports wall times for the two hot
kernels at several cloud sizes.  Run from the repo root:

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from pc_advkit.kernels import compiled, reference

SIZES = (256, 1024, 4096)
K = 20


def best_of(fn, repeats=5):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    if compiled is None:
        print("compiled extension not available; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'n':>6s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}")
    for n in SIZES:
        pts = np.ascontiguousarray(rng.normal(size=(n, 3)))
        other = np.ascontiguousarray(rng.normal(size=(n, 3)))

        for name, args in (("nearest_correspondence", (pts, other)), ("knn_indices", (pts, K))):
            ref_out = getattr(reference, name)(*args)
            ext_out = getattr(compiled, name)(*args)
            ref_flat = ref_out if isinstance(ref_out, np.ndarray) else np.concatenate(
                [np.asarray(o, dtype=np.float64).ravel() for o in ref_out]
            )
            ext_flat = ext_out if isinstance(ext_out, np.ndarray) else np.concatenate(
                [np.asarray(o, dtype=np.float64).ravel() for o in ext_out]
            )
            assert np.array_equal(ref_flat, ext_flat), f"{name} outputs diverge at n={n}"

            t_ref = best_of(lambda: getattr(reference, name)(*args))
            t_ext = best_of(lambda: getattr(compiled, name)(*args))
            print(
                f"{name:24s} {n:6d} {t_ref * 1e3:9.2f}ms {t_ext * 1e3:9.2f}ms"
                f" {t_ref / t_ext:7.1f}x"
            )


if __name__ == "__main__":
    main()
