"""Generate known-answer vectors for the accelerated coder backend.

Each case records tables, symbols, per-symbol table indices, and the exact
stream produced by the reference coder.  Layout (little-endian):

  u32 case_count
  per case: u32 table_blob_len, TableBlob bytes,
            u32 n, i32 values[n], u32 indices[n],
            u32 stream_len, stream bytes
"""

import struct
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from refcodec.cdf import build_cdf, build_cdf_from_pmf, pack_tables, uniform_table
from refcodec.rans import PureCoder


def case(tables, values, indices):
    values = np.asarray(values, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    stream = PureCoder.encode(values, indices, tables)
    blob = pack_tables(tables)
    out = struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(values))
    out += values.astype("<i4").tobytes()
    out += indices.astype("<u4").tobytes()
    out += struct.pack("<I", len(stream)) + stream
    return out


def main():
    rng = np.random.default_rng(20240817)
    cases = []

    # 1: empty stream
    cases.append(case([uniform_table(16)], [], []))

    # 2: single symbol
    cases.append(case([build_cdf(1.0, 4)], [2], [0]))

    # 3: uniform-256, 1000 symbols
    t = uniform_table(256)
    cases.append(case([t], rng.integers(0, 256, 1000), np.zeros(1000, int)))

    # 4: max-skew table with minimum-frequency tail symbols
    t = build_cdf(0.11, 8)
    vals = rng.choice([-8, -7, -1, 0, 1, 7, 8], size=500,
                      p=[0.02, 0.02, 0.1, 0.72, 0.1, 0.02, 0.02])
    cases.append(case([t], vals, np.zeros(500, int)))

    # 5: several tables interleaved
    tables = [build_cdf(s, r) for s, r in ((0.3, 3), (2.0, 12), (9.0, 40), (0.11, 1))]
    idx = rng.integers(0, 4, size=800)
    vals = [int(rng.integers(tables[i].offset, tables[i].offset + tables[i].num_symbols))
            for i in idx]
    cases.append(case(tables, vals, idx))

    # 6: wide support
    t = build_cdf(50.0, 300)
    cases.append(case([t], rng.integers(-300, 301, 400), np.zeros(400, int)))

    # 7: only minimum-frequency symbols
    t = build_cdf(0.11, 8)
    cases.append(case([t], np.full(64, 8), np.zeros(64, int)))

    # 8: long mixed stream
    tables = [build_cdf(float(s), 20) for s in (0.5, 1.5, 4.0)]
    idx = rng.integers(0, 3, size=5000)
    vals = np.clip(np.rint(rng.normal(0, 2, size=5000)), -20, 20).astype(int)
    cases.append(case(tables, vals, idx))

    # 9: asymmetric learned-prior style pmf
    pmf = np.array([0.02, 0.05, 0.4, 0.3, 0.15, 0.05, 0.03])
    t = build_cdf_from_pmf(pmf, offset=-2)
    cases.append(case([t], rng.integers(-2, 5, 300), np.zeros(300, int)))

    # 10: support edges
    t = build_cdf(1.0, 6)
    cases.append(case([t], [-6, 6, -6, 6, 0], np.zeros(5, int)))

    blob = struct.pack("<I", len(cases)) + b"".join(cases)
    out = Path(__file__).resolve().parents[1] / "rans-backend" / "fixtures" / "kat.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    print(f"wrote {out} ({len(blob)} bytes, {len(cases)} cases)")


if __name__ == "__main__":
    main()
