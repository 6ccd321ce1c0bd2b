"""Throughput comparison of the entropy-coder backends.

Backends: pure Python reference, the compiled in-process kernel selected at
import (when built), and the accelerated shared-library backend (when built).
Correctness never depends on these numbers; the accelerated backend has a
non-blocking 5x-over-pure target.

Run:  python benchmarks/bench_rans.py [n_symbols]
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from refcodec.cdf import build_cdf
from refcodec.rans import PureCoder, ReferenceCoder, kernel_name
from refcodec.rans.accelerated import AcceleratedCoder


def bench(coder, values, idx, tables, n_repeat=3):
    best_enc = best_dec = float("inf")
    stream = coder.encode(values, idx, tables)
    for _ in range(n_repeat):
        t0 = time.perf_counter()
        stream = coder.encode(values, idx, tables)
        t1 = time.perf_counter()
        out = coder.decode(stream, idx, tables, len(values))
        t2 = time.perf_counter()
        best_enc = min(best_enc, t1 - t0)
        best_dec = min(best_dec, t2 - t1)
    assert np.array_equal(out, values)
    return best_enc, best_dec, len(stream)


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 400_000
    rng = np.random.default_rng(0)
    tables = [build_cdf(float(s), 24) for s in (0.3, 0.9, 2.5, 7.0)]
    idx = rng.integers(0, len(tables), size=n)
    values = np.clip(np.rint(rng.normal(0, 2.0, size=n)), -24, 24).astype(np.int64)

    rows = [("pure-python", PureCoder)]
    if kernel_name() == "cython":
        rows.append(("reference (cython kernel)", ReferenceCoder))
    if AcceleratedCoder.available():
        rows.append(("accelerated (shared lib)", AcceleratedCoder.load()))

    print(f"payload: {n} symbols over {len(tables)} tables")
    results = {}
    for name, coder in rows:
        enc, dec, size = bench(coder, values, idx, tables)
        results[name] = (enc, dec)
        print(
            f"{name:28s} encode {n / enc / 1e6:7.2f} Msym/s   "
            f"decode {n / dec / 1e6:7.2f} Msym/s   ({size} bytes)"
        )
    base_enc, base_dec = results["pure-python"]
    for name, (enc, dec) in results.items():
        if name == "pure-python":
            continue
        print(f"{name:28s} speedup vs pure: encode {base_enc / enc:5.1f}x  decode {base_dec / dec:5.1f}x")


if __name__ == "__main__":
    main()
