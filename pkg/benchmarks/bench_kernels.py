"""Compare the numba loop kernels with their numpy twins.

Kernel timings call both implementations directly in one process. The
end-to-end timing (``--e2e``) re-runs this script in child processes with and
without MFABA_DISABLE_NUMBA=1, since the backend is fixed at import.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--e2e]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def kernel_table(repeat: int) -> list[dict]:
    from mfaba import kernels
    from mfaba._accel import HAS_NUMBA

    if not HAS_NUMBA:
        print("numba unavailable (or disabled); only numpy kernels timed")
    rng = np.random.default_rng(0)
    rows = []
    for B, C, H, F, K in ((1, 1, 8, 8, 3), (64, 1, 8, 8, 3), (64, 3, 16, 8, 3), (16, 8, 28, 16, 3)):
        x = rng.normal(size=(B, C, H, H))
        w = rng.normal(size=(F, C, K, K))
        b = rng.normal(size=F)
        y = kernels.conv2d_forward_np(x, w, b)
        dout = rng.normal(size=y.shape)
        pooled, idx = kernels.maxpool_forward_np(y, 2)
        dp = rng.normal(size=pooled.shape)
        cases = {
            "conv_fwd": (lambda: kernels.conv2d_forward_np(x, w, b), lambda: kernels.conv2d_forward_nb(x, w, b)),
            "conv_bwd": (lambda: kernels.conv2d_backward_np(x, w, dout), lambda: kernels.conv2d_backward_nb(x, w, dout)),
            "pool_fwd": (lambda: kernels.maxpool_forward_np(y, 2), lambda: kernels.maxpool_forward_nb(y, 2)),
            "pool_bwd": (lambda: kernels.maxpool_backward_np(dp, idx, y.shape, 2),
                         lambda: kernels.maxpool_backward_nb(dp, idx, y.shape, 2)),
        }
        for name, (f_np, f_nb) in cases.items():
            row = {"kernel": name, "shape": f"B{B} C{C} {H}x{H} F{F} k{K}"}
            row["numpy_us"] = 1e6 * min(timeit.repeat(f_np, number=1, repeat=repeat))
            if HAS_NUMBA:
                f_nb()  # compile
                row["numba_us"] = 1e6 * min(timeit.repeat(f_nb, number=1, repeat=repeat))
                row["speedup"] = row["numpy_us"] / row["numba_us"]
            rows.append(row)
    return rows


def e2e_child(n: int, batch: int) -> dict:
    from mfaba._accel import backend
    from mfaba.attribution import MethodSettings, explain
    from mfaba.desk import bars_cnn
    from mfaba.metrics import BenchConfig, fps_compare

    model, _, ev = bars_cnn()
    X, y = ev.inputs[:n], ev.labels[:n]
    cfg = BenchConfig(repetitions=3, batch_size=batch, warmup=1)
    fns = {m: (lambda A, b, m=m: explain(model, A, b, m, MethodSettings())) for m in ("mfaba-smooth", "ig")}
    out = {"backend": backend()}
    for method, r in fps_compare(fns, X, y, cfg).items():
        out[method] = {"fps_single": r["fps_single"], "fps_batch": r["fps_batch"]}
    return out


def e2e(n: int, batch: int) -> list[dict]:
    results = []
    for disable in ("0", "1"):
        env = dict(os.environ, MFABA_DISABLE_NUMBA=disable)
        proc = subprocess.run([sys.executable, __file__, "--child", "--n", str(n), "--batch", str(batch)],
                              env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--e2e", action="store_true", help="also time mfaba-smooth and ig under both backends")
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(e2e_child(args.n, args.batch)))
        return

    print(f"{'kernel':<9} {'shape':<24} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for r in kernel_table(args.repeat):
        nb = f"{r['numba_us']:10.1f} {r['speedup']:7.1f}x" if "numba_us" in r else f"{'-':>10} {'-':>8}"
        print(f"{r['kernel']:<9} {r['shape']:<24} {r['numpy_us']:10.1f} {nb}")

    if args.e2e:
        print(f"\nend to end on the desk CNN, {args.n} images, batch {args.batch} (images/s)")
        for r in e2e(args.n, args.batch):
            m, i = r["mfaba-smooth"], r["ig"]
            print(f"{r['backend']:<6} mfaba-smooth batch {m['fps_batch']:8.0f} single {m['fps_single']:7.0f} | "
                  f"ig batch {i['fps_batch']:8.0f} single {i['fps_single']:7.0f} | "
                  f"batch ratio {m['fps_batch'] / i['fps_batch']:.2f}")


if __name__ == "__main__":
    main()
