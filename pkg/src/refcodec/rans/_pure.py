"""Pure-Python rANS kernel: the normative reference for every other backend.

Stream layout: 4-byte little-endian flush of the final encoder state, then
renormalization bytes in reverse emission order, so the decoder reads the
stream strictly forward.  Constants are part of the coder contract:
16-bit probabilities, state lower bound 2^23, byte-wise renormalization,
symbols encoded in reverse order.
"""

from __future__ import annotations

from bisect import bisect_right

PROB_BITS = 16
PROB_MASK = (1 << PROB_BITS) - 1
STATE_LOWER = 1 << 23
CONTRACT_VERSION = "rans-16-L23-v1"


class StreamError(ValueError):
    """Truncated or corrupt coded stream."""


def kernel_encode(sym_idx, table_of, cdfs) -> bytes:
    """Encode symbol indices; cdfs is a list of per-table cdf int lists."""
    x = STATE_LOWER
    renorm = bytearray()
    shift = STATE_LOWER >> PROB_BITS << 8
    for i in range(len(sym_idx) - 1, -1, -1):
        cdf = cdfs[table_of[i]]
        s = sym_idx[i]
        start = cdf[s]
        freq = cdf[s + 1] - start
        x_max = shift * freq
        while x >= x_max:
            renorm.append(x & 0xFF)
            x >>= 8
        x = ((x // freq) << PROB_BITS) + (x % freq) + start
    out = x.to_bytes(4, "little") + bytes(reversed(renorm))
    return out


def kernel_decode(data: bytes, n: int, table_of, cdfs) -> list:
    if len(data) < 4:
        raise StreamError("stream shorter than the 4-byte state flush")
    x = int.from_bytes(data[:4], "little")
    pos = 4
    size = len(data)
    out = [0] * n
    for i in range(n):
        cdf = cdfs[table_of[i]]
        cf = x & PROB_MASK
        s = bisect_right(cdf, cf) - 1
        start = cdf[s]
        freq = cdf[s + 1] - start
        x = freq * (x >> PROB_BITS) + cf - start
        while x < STATE_LOWER:
            if pos >= size:
                raise StreamError("stream truncated during renormalization")
            x = (x << 8) | data[pos]
            pos += 1
        out[i] = s
    if x != STATE_LOWER:
        raise StreamError("decoder state did not return to the lower bound")
    return out, pos
