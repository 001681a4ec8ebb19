"""Rasterizer benchmark: tiled vs brute force, numba vs numpy.

    python benchmarks/bench_raster.py                # full table, 10k surfels at 256x256
    python benchmarks/bench_raster.py --quick        # small sizes only

The numpy backend is selected per call (``backend="numpy"``), so both
backends run in one process. Results are appended to
``benchmarks/results.log`` as one JSON line per run.
"""
from __future__ import annotations

import argparse
import json
import platform
import time
from pathlib import Path

import numpy as np

from surfel_avatar import _jit
from surfel_avatar.geometry import as_posed
from surfel_avatar.raster import render
from surfel_avatar.scenes import benchmark_scene


def _time(fn, repeat):
    fn()  # warm-up (numba compile / cache load)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_case(n, size, mode, backend, repeat=3, keep_records=False):
    surfels, cam = benchmark_scene(n, size)
    posed = as_posed(surfels)
    colors = np.clip(np.random.default_rng(0).uniform(0, 1, (n, 3)), 0, 1)
    sec = _time(lambda: render(posed, cam, 0, mode=mode, backend=backend, colors=colors,
                               keep_records=keep_records), repeat)
    return {"surfels": n, "size": size, "mode": mode, "backend": backend, "seconds": sec,
            "fps": 1.0 / sec, "records": keep_records}


def tiled_speedup(n=10000, size=256, repeat=1):
    """(brute-force seconds / tiled seconds) with the compiled backend."""
    backend = "numba" if _jit.USE_NUMBA else "numpy"
    t = run_case(n, size, "tiled", backend, repeat=max(repeat, 3))
    b = run_case(n, size, "bruteforce", backend, repeat=repeat)
    return b["seconds"] / t["seconds"], t, b


LOG_PATH = Path(__file__).with_name("results.log")


def append_log(rows, path=LOG_PATH, source="bench_raster"):
    entry = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "source": source, "machine": platform.machine(),
             "python": platform.python_version(), "rows": rows}
    with open(path, "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--log", default=str(LOG_PATH))
    a = ap.parse_args(argv)

    rows = []
    numba_ok = _jit.USE_NUMBA
    cases = [(2000, 64), (10000, 128)] if a.quick else [(2000, 64), (10000, 128), (10000, 256)]
    for n, size in cases:
        for backend in (("numba", "numpy") if numba_ok else ("numpy",)):
            rows.append(run_case(n, size, "tiled", backend))
            rows.append(run_case(n, size, "tiled", backend, keep_records=True))
            # the numpy brute force at 256^2 x 10k is minutes; skip it
            if backend == "numba" or n * size * size <= 2000 * 64 * 64:
                rows.append(run_case(n, size, "bruteforce", backend, repeat=1))

    print(f"{'surfels':>8} {'size':>5} {'mode':>11} {'backend':>7} {'records':>7} {'ms':>10} {'fps':>8}")
    for r in rows:
        print(f"{r['surfels']:>8} {r['size']:>5} {r['mode']:>11} {r['backend']:>7} {str(r['records']):>7} "
              f"{1e3 * r['seconds']:>10.2f} {r['fps']:>8.2f}")

    def find(n, size, mode, backend, rec=False):
        for r in rows:
            if (r["surfels"], r["size"], r["mode"], r["backend"], r["records"]) == (n, size, mode, backend, rec):
                return r["seconds"]
        return None

    print()
    for n, size in cases:
        for backend in (("numba", "numpy") if numba_ok else ("numpy",)):
            t, b = find(n, size, "tiled", backend), find(n, size, "bruteforce", backend)
            if t and b:
                print(f"tiled speedup over brute force ({backend}, {n} surfels, {size}^2): {b / t:.1f}x")
        if numba_ok:
            t_nb, t_np = find(n, size, "tiled", "numba"), find(n, size, "tiled", "numpy")
            print(f"numba speedup over numpy (tiled, {n} surfels, {size}^2): {t_np / t_nb:.1f}x")

    append_log(rows, a.log)
    print(f"\nappended to {a.log}")


if __name__ == "__main__":
    main()
