"""Compare the numba and pure-numpy kernel backends.

Usage: python3 benchmarks/bench_backends.py [--repeats 5]

Times the causal scan (forward and backward) and a full greedy decode for
each backend, and checks that both produce the same numbers.
"""

import argparse
import statistics
import time

import numpy as np

from rfa import _kernels, bench
from rfa.numerics import RngState, seeded_normal_matrix


def _time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def scan_case(B=16, N=16, F=64, dv=16, seed=0):
    rng = RngState(seed)
    pq, rng = seeded_normal_matrix(rng, B * N, F)
    pk, rng = seeded_normal_matrix(rng, B * N, F)
    v, rng = seeded_normal_matrix(rng, B * N, dv)
    g, rng = seeded_normal_matrix(rng, B * N, 1)
    up, rng = seeded_normal_matrix(rng, B * N, dv)
    pq, pk = np.abs(pq.reshape(B, N, F)), np.abs(pk.reshape(B, N, F))
    a = 1.0 / (1.0 + np.exp(-g.reshape(B, N)))
    return pq, pk, v.reshape(B, N, dv), a, 1.0 - a, up.reshape(B, N, dv)


def run_scan(kernels, case):
    pq, pk, v, a, b, up = case
    B, N, F = pq.shape
    S0, z0 = np.zeros((B, F, v.shape[2])), np.zeros((B, F))
    fwd = kernels["scan_forward"](pq, pk, v, a, b, S0, z0, 1e-6, True)
    out, S, z, u, S_hist, z_hist = fwd
    bwd = kernels["scan_backward"](pq, pk, v, a, b, S0, z0, S_hist, z_hist, u, out, up,
                                   np.zeros_like(S), np.zeros_like(z), 1e-6)
    return out, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _kernels.NUMBA_BACKEND is None:
        print("numba backend unavailable; only numpy would run")
        return
    case = scan_case()
    ref = run_scan(_kernels.NUMPY_BACKEND, case)
    got = run_scan(_kernels.NUMBA_BACKEND, case)
    diff = max(float(np.max(np.abs(x - y))) for x, y in zip([ref[0], *ref[1]], [got[0], *got[1]]))
    print(f"scan parity max_abs_diff={diff:.3e}")
    for name in ("numpy", "numba"):
        k = _kernels.get_backend(name)
        t = _time(lambda: run_scan(k, case), args.repeats)
        print(f"scan fwd+bwd  backend={name:5s} median={t * 1e3:8.3f} ms")
    cfg = bench.DecodeConfig(warmup=1, repeats=args.repeats)
    for kind in ("softmax", "rfa-gaussian"):
        for name in ("numpy", "numba"):
            r = bench.decode_bench(kind, "unconditional", [512], 1, cfg, backend=name)[0]
            print(f"decode N=512 kind={kind:12s} backend={name:5s} total={r.total_seconds * 1e3:8.2f} ms "
                  f"median_step={r.median_step_seconds * 1e6:7.2f} us")


if __name__ == "__main__":
    main()
