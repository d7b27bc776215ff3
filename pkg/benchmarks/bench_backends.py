"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs both implementations of each hot kernel on identical inputs and
prints per-kernel timings.  Requires numba importable (otherwise only the
numpy path is timed).  Usage:

    python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from nvfp4lab import backend
from nvfp4lab import dense, fp_codec, microscale, rht


def timeit(fn, repeats):
    fn()  # warm-up (JIT compile / cache load)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_gemm(repeats):
    gen = np.random.default_rng(0)
    a = gen.normal(size=(256, 512))
    b = gen.normal(size=(512, 128))
    out = np.empty((256, 128))
    yield "gemm 256x512x128", {
        "numba": lambda: dense._gemm_kernel(a, b, out),
        "numpy": lambda: dense._gemm_numpy(a, b),
    }


def bench_quantize(repeats):
    gen = np.random.default_rng(1)
    x = gen.normal(size=1 << 20)
    scaled = np.clip(x * 2.0, -6.5, 6.5)
    out = np.empty(scaled.shape[0], dtype=np.uint8)
    idx = np.arange(scaled.shape[0], dtype=np.uint64)
    table = fp_codec.E2M1_VALUES
    yield "e2m1 rtn 1M", {
        "numba": lambda: fp_codec._encode_rtn_kernel(scaled, table, 6.0, out),
        "numpy": lambda: fp_codec._encode_rtn_numpy(scaled, table, 6.0),
    }
    yield "e2m1 sr 1M", {
        "numba": lambda: fp_codec._encode_sr_kernel(
            scaled, table, 6.0, np.uint64(7), idx, out),
        "numpy": lambda: fp_codec._encode_sr_numpy(scaled, table, 6.0, 7, idx),
    }


def bench_qgemm(repeats):
    gen = np.random.default_rng(2)
    qa = microscale.quantize_tensor(gen.normal(size=(128, 1024)))
    qb = microscale.quantize_tensor(gen.normal(size=(1024, 128)), axis=0)
    va, vb = qa.code_values(), qb.code_values()
    ga = qa.scales.decoded.reshape(qa.grid_shape)
    gbt = qb.scales.decoded.reshape(qb.grid_shape)
    out = np.empty((128, 128))
    yield "qgemm 128x1024x128", {
        "numba": lambda: microscale._qgemm_kernel(va, ga, vb, gbt, out),
        "numpy": lambda: microscale._qgemm_numpy(va, ga, vb, gbt),
    }


def bench_fwht(repeats):
    gen = np.random.default_rng(3)
    t = gen.normal(size=(4096, 64))
    yield "fwht 4096x64", {
        "numba": lambda: rht._fwht_kernel(t.copy()),
        "numpy": lambda: rht._fwht_numpy(t.copy()),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available: {backend.HAVE_NUMBA}  "
          f"(active backend: {backend.active_backend()})")
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>9s}")
    for gen_bench in (bench_gemm, bench_quantize, bench_qgemm, bench_fwht):
        for name, impls in gen_bench(args.repeats):
            t_np = timeit(impls["numpy"], args.repeats) * 1e3
            if backend.HAVE_NUMBA:
                t_nb = timeit(impls["numba"], args.repeats) * 1e3
                print(f"{name:24s} {t_nb:10.3f} {t_np:10.3f} {t_np / t_nb:8.1f}x")
            else:
                print(f"{name:24s} {'-':>10s} {t_np:10.3f} {'-':>9s}")


if __name__ == "__main__":
    main()
