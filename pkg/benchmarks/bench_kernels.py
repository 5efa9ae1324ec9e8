"""Compare the compiled and pure-Python kernel backends.

Times matmul, row softmax, fused attention and one end-to-end sampling run
on each backend, checks that both agree, and writes a CSV table.

The compiled kernels are serial loops with a fixed summation order, so the
like-for-like comparison is against the python backend in strict mode
(``python_strict``), which also avoids BLAS. Plain ``python`` uses whatever
BLAS numpy links and is usually fastest, but not bit-reproducible across
machines or thread counts.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--out bench_kernels.csv]
"""
from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from iccdit import kernels
from iccdit.core import Rng
from iccdit.model import ModelConfig, ToyDiT, sample
from iccdit.tasks import SyntheticTask


def _time(fn, repeats):
    fn()  # warm-up
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def cases(rng):
    for n in (16, 48, 128):
        a, b = rng.normal((n, 32)), rng.normal((32, n))
        yield f"matmul {n}x32x{n}", lambda a=a, b=b: kernels.matmul(a, b)
        s = rng.normal((n, 2 * n))
        yield f"softmax {n}x{2 * n}", lambda s=s: kernels.softmax_rows(s)
        q, k, v = rng.normal((n, 16)), rng.normal((2 * n, 16)), rng.normal((2 * n, 16))
        yield (f"attention {n}q x {2 * n}k masked",
               lambda q=q, k=k, v=v, n=n: kernels.attention(q, k, v, 0.25, n // 2, n))
    cfg = ModelConfig(mode="fulldit2", active_layers=(0, 2))
    model = ToyDiT.init(cfg, seed=0)
    _, ctx = SyntheticTask("copy", cfg.d_latent, cfg.n_z, cfg.contexts, 0).draw(Rng(1))
    yield "sample fulldit2 T=8", lambda: sample(model, ctx, 8, Rng(2))
    base = model.with_mode("baseline_icc")
    yield "sample baseline_icc T=8", lambda: sample(base, ctx, 8, Rng(2))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default=None, help="CSV path (default stdout)")
    args = ap.parse_args(argv)

    if not kernels.compiled_available():
        print("compiled extension not built; only the python backend is timed", file=sys.stderr)
    backends = ["python", "python_strict"] + (["compiled"] if kernels.compiled_available() else [])

    rows = []
    for name, fn in cases(Rng(0)):
        row = {"case": name}
        outs = {}
        for be in backends:
            kernels.STRICT = be == "python_strict"
            with kernels.use_backend(be.split("_")[0]):
                row[be + "_s"] = _time(fn, args.repeats)
                res = fn()
                outs[be] = np.asarray(res[0] if isinstance(res, tuple) else res, np.float64)
        kernels.STRICT = False
        if "compiled" in outs:
            row["speedup_vs_strict"] = row["python_strict_s"] / row["compiled_s"]
            row["speedup_vs_blas"] = row["python_s"] / row["compiled_s"]
            row["max_abs_diff"] = float(np.max(np.abs(outs["python"] - outs["compiled"])))
        rows.append(row)

    header = ["case"] + [b + "_s" for b in backends]
    if "compiled" in backends:
        header += ["speedup_vs_strict", "speedup_vs_blas", "max_abs_diff"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
