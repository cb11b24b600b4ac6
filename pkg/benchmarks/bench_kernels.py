"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs on inputs shaped like a desk-scale forward pass
(4 heads, 120-token sequences, d_h=64) and on LCS inputs the size of a
long reference. Reports the best-of-N time per call and the speedup.
"""
import argparse
import json
import timeit

import numpy as np

from amg.numkernel import _kernels_py as py

try:
    from amg.numkernel import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    x = rng.standard_normal((4, 120, 120)).astype(np.float32)
    mask = np.where(np.tril(np.ones((120, 120))) > 0, 0.0, -1e9).astype(np.float32)
    y = py.softmax_masked_fwd(x.copy(), mask)
    gy = rng.standard_normal(y.shape).astype(np.float32)
    h = rng.standard_normal((120, 64)).astype(np.float32)
    gain = np.ones(64, np.float32)
    bias = np.zeros(64, np.float32)
    _, xhat, rstd = py.layer_norm_fwd(h, gain, bias, 1e-5)
    a = rng.integers(0, 30, 64).astype(np.int64)
    b = rng.integers(0, 30, 64).astype(np.int64)
    return {
        "softmax_masked_fwd": lambda k: k.softmax_masked_fwd(x.copy(), mask),
        "softmax_masked_bwd": lambda k: k.softmax_masked_bwd(y, gy),
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(h, gain, bias, 1e-5),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(gy[0, :, :64].copy(), xhat, rstd, gain),
        "lcs_length": lambda k: k.lcs_length(a, b),
    }


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = []
    for name, call in cases(np.random.default_rng(0)).items():
        t_py = best_time(lambda: call(py), args.repeat)
        t_cy = best_time(lambda: call(cy), args.repeat) if cy is not None else None
        rows.append({"kernel": name, "python_us": t_py * 1e6,
                     "cython_us": None if t_cy is None else t_cy * 1e6,
                     "speedup": None if t_cy is None else t_py / t_cy})
    print(f"{'kernel':22s} {'python us':>11s} {'cython us':>11s} {'speedup':>8s}")
    for r in rows:
        cy_s = "n/a" if r["cython_us"] is None else f"{r['cython_us']:.1f}"
        sp = "n/a" if r["speedup"] is None else f"{r['speedup']:.2f}x"
        print(f"{r['kernel']:22s} {r['python_us']:11.1f} {cy_s:>11s} {sp:>8s}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
