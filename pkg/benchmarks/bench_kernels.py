"""Compare the compiled tile-update kernel with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Reports the median time per call for single tile updates of several shapes,
and for a full tiled layer forward with each backend patched in. The
``auto`` column is the size-based dispatch that the package uses. Both
backends are also checked against each other on every shape.
"""
from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from rtlab import kernels, tiling
from rtlab.kernels import _fallback
from rtlab.layers import init_layer_params

try:
    from rtlab.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_tile(impl, nq, nk, d, repeat, rng):
    q, k, v = rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), rng.normal(size=(nk, d))
    bias = rng.normal(size=(nq, nk))
    state = (np.full(nq, -np.inf), np.zeros(nq), np.zeros((nq, d)))

    def call():
        m, l, o = state[0].copy(), state[1].copy(), state[2].copy()
        impl.update_tile(q, k, v, bias, m, l, o)
        return m, l, o

    return _median_time(call, repeat), call()


def bench_layer(impl, n, d, heads, repeat, rng):
    p = init_layer_params(rng, d, heads)
    x = rng.normal(size=(n, d))
    saved = tiling.update_tile
    tiling.update_tile = impl.update_tile
    try:
        return _median_time(lambda: tiling.rt_forward_tiled(p, x), repeat)
    finally:
        tiling.update_tile = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    impls = {"python": _fallback}
    if _ckernels is not None:
        impls["cython"] = _ckernels
        impls["auto"] = kernels
    print(f"selected backend at import: {kernels.BACKEND}")
    rows = []
    for nq, nk, d in [(1, 1, 8), (1, 1, 32), (4, 4, 16), (16, 16, 16), (64, 64, 32)]:
        row = {"case": f"tile q={nq} kv={nk} d={d}"}
        outs = {}
        for name, impl in impls.items():
            row[name], outs[name] = bench_tile(impl, nq, nk, d, args.repeat, rng)
        if "cython" in outs:
            row["max_abs_diff"] = max(float(np.abs(a - b).max()) for a, b in zip(outs["python"], outs["cython"]))
        rows.append(row)
    for n, d, h in [(64, 16, 2), (128, 16, 2)]:
        row = {"case": f"layer N={n} D={d} H={h}"}
        for name, impl in impls.items():
            row[name] = bench_layer(impl, n, d, h, max(args.repeat // 20, 3), rng)
        rows.append(row)
    print(f"{'case':<26}{'python (us)':>14}{'cython (us)':>14}{'auto (us)':>14}{'auto speedup':>14}")
    for row in rows:
        cells = [f"{row[k] * 1e6:14.1f}" if k in row else f"{'n/a':>14}" for k in ("python", "cython", "auto")]
        sp = f"{row['python'] / row['auto']:14.2f}" if "auto" in row else f"{'n/a':>14}"
        print(f"{row['case']:<26}{''.join(cells)}{sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
