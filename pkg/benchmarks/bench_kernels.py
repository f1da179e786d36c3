"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes match one training run at default size: a 2000-slot, 64-d memory,
32-row batches, top-k over the full memory and ranking 360 queries against
a 480-item gallery. Outputs of the two paths are compared before timing.
"""
import argparse
import time

import numpy as np

from memuda import _kernels


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def cases(rng):
    n, d = 2000, 64
    slots = rng.standard_normal((n, d))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    idx = rng.integers(n, size=(50, 32))
    feats = rng.standard_normal((50, 32, d))
    scores = rng.standard_normal((32, n))
    excl = rng.integers(n, size=32)
    sim = rng.standard_normal((360, 480))
    rel = rng.random((360, 480)) < 0.02

    def ema(impl):
        s = slots.copy()
        for b in range(idx.shape[0]):
            impl.ema_update(s, idx[b], feats[b], 0.3)
        return s

    return {
        "ema_update (50 batches)": ema,
        "topk (32 x 2000, k=8)": lambda impl: impl.topk(scores, 8, excl),
        "rank_stats (360 x 480)": lambda impl: impl.rank_stats(sim, rel),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        ref, fast = fn(_kernels.numpy_impl), fn(_kernels.numba_impl)  # also warms the JIT
        for a, b in zip(_as_tuple(ref), _as_tuple(fast)):
            np.testing.assert_allclose(a, b, atol=1e-12)
        t_np = _time(lambda: fn(_kernels.numpy_impl), args.repeat)
        t_nb = _time(lambda: fn(_kernels.numba_impl), args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
