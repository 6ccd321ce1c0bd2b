"""Integer CDF tables for the range coder.

Tables use 16-bit probability precision: frequencies are positive integers
summing to exactly 65536.  Gaussian tables are mu-centered over symbols
[-R, R]; hyper-latent tables come from the learned factorized densities.
Tables are always built on the Python side and handed to whichever coder
backend is active, so every backend codes against identical integers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensors import ContractError

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS
MAX_SYMBOLS = 32768


@dataclass
class CdfTable:
    """cdf[0] = 0, cdf[S] = 65536, strictly increasing; value = index + offset."""

    cdf: np.ndarray
    offset: int

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.uint32)
        if self.cdf[0] != 0 or self.cdf[-1] != PROB_SCALE:
            raise ContractError("cdf must span [0, 65536]")
        if not (np.diff(self.cdf.astype(np.int64)) >= 1).all():
            raise ContractError("every symbol frequency must be >= 1")

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf.astype(np.int64))

    def __eq__(self, other):
        return (
            isinstance(other, CdfTable)
            and self.offset == other.offset
            and np.array_equal(self.cdf, other.cdf)
        )


def normalize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies: floor at 1, renormalize to exactly 65536.

    The rounding surplus/deficit is absorbed by the largest bin; in the rare
    case that would push it below 1, remaining deficit is swept off all
    bins > 1 one unit at a time.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = len(pmf)
    if n < 2:
        raise ContractError("need at least 2 symbols")
    if n > MAX_SYMBOLS:
        raise ContractError(f"table too large ({n} symbols)")
    total = pmf.sum()
    if not np.isfinite(total) or total <= 0:
        raise ContractError("pmf must have positive finite mass")
    q = pmf / total
    freqs = np.maximum(1, np.floor(q * PROB_SCALE + 0.5).astype(np.int64))
    diff = PROB_SCALE - int(freqs.sum())
    if diff != 0:
        # absorb into the largest bin; on ties take the one nearest the array
        # midpoint so symmetric pmfs keep exactly symmetric frequencies
        ties = np.flatnonzero(freqs == freqs.max())
        amax = int(ties[np.argmin(np.abs(ties - (n - 1) / 2.0))])
        take = diff if diff > 0 else max(diff, 1 - int(freqs[amax]))
        freqs[amax] += take
        diff -= take
    while diff < 0:
        reducible = freqs > 1
        if not reducible.any():
            raise ContractError("cannot renormalize pmf to 65536")
        k = min(int(reducible.sum()), -diff)
        idx = np.flatnonzero(reducible)[:k]
        freqs[idx] -= 1
        diff += k
    return freqs


def freqs_to_table(freqs: np.ndarray, offset: int) -> CdfTable:
    cdf = np.zeros(len(freqs) + 1, dtype=np.uint32)
    cdf[1:] = np.cumsum(freqs)
    return CdfTable(cdf, offset)


def gaussian_pmf(sigma: float, support_radius: int) -> np.ndarray:
    """Discretized N(0, sigma^2) over [-R, R], exactly symmetric."""
    R = int(support_radius)
    v = np.arange(0, R + 1, dtype=np.float64)
    upper = 0.5 * np.array([math.erfc(-((x + 0.5) / sigma) / math.sqrt(2)) for x in v])
    lower = 0.5 * np.array([math.erfc(-((x - 0.5) / sigma) / math.sqrt(2)) for x in v])
    half = upper - lower
    pmf = np.concatenate([half[:0:-1], half])
    return pmf


def build_cdf(sigma: float, support_radius: int) -> CdfTable:
    """Coding table for a mu-centered discretized Gaussian."""
    if sigma < 0.11:
        raise ContractError("sigma below the 0.11 lower bound")
    if support_radius < 1:
        raise ContractError("support radius must be >= 1")
    pmf = gaussian_pmf(sigma, support_radius)
    freqs = normalize_pmf(pmf)
    return freqs_to_table(freqs, offset=-int(support_radius))


def build_cdf_from_pmf(pmf: np.ndarray, offset: int) -> CdfTable:
    """Coding table from an arbitrary pmf (used for the hyper-latent)."""
    return freqs_to_table(normalize_pmf(pmf), offset)


def uniform_table(num_symbols: int, offset: int = 0) -> CdfTable:
    if PROB_SCALE % num_symbols:
        raise ContractError("uniform table size must divide 65536")
    return freqs_to_table(np.full(num_symbols, PROB_SCALE // num_symbols, np.int64), offset)


# ---------------------------------------------------------------------------
# flat byte layout shared with out-of-process coder backends


def pack_tables(tables: list[CdfTable]) -> bytes:
    """TableBlob: count u32, then per table {symbol_count u16, offset i32,
    cdf u32[symbol_count+1]}, little-endian."""
    out = bytearray(struct.pack("<I", len(tables)))
    for t in tables:
        out += struct.pack("<Hi", t.num_symbols, t.offset)
        out += t.cdf.astype("<u4").tobytes()
    return bytes(out)


def unpack_tables(blob: bytes) -> list[CdfTable]:
    tables = []
    (count,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    for _ in range(count):
        sym_count, offset = struct.unpack_from("<Hi", blob, pos)
        pos += 6
        cdf = np.frombuffer(blob, dtype="<u4", count=sym_count + 1, offset=pos).copy()
        pos += 4 * (sym_count + 1)
        tables.append(CdfTable(cdf, offset))
    if pos != len(blob):
        raise ContractError("trailing bytes in table blob")
    return tables
