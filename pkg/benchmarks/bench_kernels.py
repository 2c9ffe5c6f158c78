"""Compare the compiled transport kernels against the numpy fallback.

Times lse_rows / cost_rows / row_sums on solver-shaped inputs and a full
annealed solve through each backend, checking agreement as it goes.

    python3 benchmarks/bench_kernels.py [--quick]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tarot import _core_py as pure

try:
    from tarot import _core as compiled
except ImportError:
    compiled = None


def timed(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_kernels(n, m, dtype, reps, threads):
    rng = np.random.default_rng(0)
    cost = np.ascontiguousarray(2.0 * rng.random((n, m)), dtype=dtype)
    f = rng.standard_normal(n) * 0.01
    g = rng.standard_normal(m) * 0.01
    inv_reg = 1.0 / 0.05
    label = f"{n}x{m} {np.dtype(dtype).name}"

    cases = [
        ("lse_rows", lambda k: k.lse_rows(cost, g, inv_reg, threads)),
        ("cost_rows", lambda k: k.cost_rows(cost, f, g, inv_reg, threads)),
        ("row_sums", lambda k: k.row_sums(cost, f, g, inv_reg, threads)),
    ]
    for name, call in cases:
        t_py, ref = timed(lambda: call(pure), reps)
        if compiled is None:
            print(f"{label:>18}  {name:<10} python {t_py * 1e3:8.2f} ms  (no extension built)")
            continue
        t_c, out = timed(lambda: call(compiled), reps)
        ok = np.allclose(out, ref, rtol=1e-10, atol=1e-12)
        print(
            f"{label:>18}  {name:<10} python {t_py * 1e3:8.2f} ms"
            f"  compiled {t_c * 1e3:8.2f} ms  x{t_py / t_c:5.1f}"
            f"  {'agree' if ok else 'DISAGREE'}"
        )


def bench_solve(n, m, threads):
    from tarot.metric import WhitenedFeatures
    from tarot.ot import MassVector, cost_matrix, sinkhorn

    rng = np.random.default_rng(1)

    def unit(k, p):
        x = rng.standard_normal((k, 16))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return WhitenedFeatures(x, tuple(f"{p}{i}" for i in range(k)))

    c = cost_matrix(unit(n, "s"), unit(m, "t"))
    a, b = MassVector.uniform(n), MassVector.uniform(m)

    results = {}
    import tarot.ot as ot_mod

    for name, impl in (("python", pure), ("compiled", compiled)):
        if impl is None:
            continue
        saved = (ot_mod.lse_rows, ot_mod.cost_rows, ot_mod.row_sums)
        ot_mod.lse_rows, ot_mod.cost_rows, ot_mod.row_sums = (
            impl.lse_rows, impl.cost_rows, impl.row_sums,
        )
        try:
            t0 = time.perf_counter()
            plan = sinkhorn(c, a, b, reg=0.01, anneal=True, threads=threads)
            results[name] = (time.perf_counter() - t0, plan.cost, plan.iterations)
        finally:
            ot_mod.lse_rows, ot_mod.cost_rows, ot_mod.row_sums = saved
    for name, (dt, cost, iters) in results.items():
        print(f"full solve {n}x{m}  {name:<8} {dt:6.2f} s  cost {cost:.6f}  {iters} iterations")
    if len(results) == 2:
        assert abs(results["python"][1] - results["compiled"][1]) < 1e-9


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true", help="small shapes only")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    print(f"extension available: {compiled is not None}")
    shapes = [(2_000, 1_000)] if args.quick else [(2_000, 1_000), (13_000, 5_000)]
    for n, m in shapes:
        for dtype in (np.float64, np.float32):
            bench_kernels(n, m, dtype, reps=3, threads=args.threads)
    bench_solve(*((1_000, 400) if args.quick else (4_000, 1_500)), threads=args.threads)


if __name__ == "__main__":
    main()
