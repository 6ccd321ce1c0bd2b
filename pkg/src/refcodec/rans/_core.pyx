# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rANS kernel, byte-identical to the pure-Python reference."""

from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t

import numpy as np

from refcodec.rans._pure import StreamError

DEF PROB_BITS = 16
DEF STATE_LOWER = 8388608  # 1 << 23


def kernel_encode(int64_t[::1] sym_idx, int64_t[::1] table_of,
                  uint32_t[::1] cdf_flat, int64_t[::1] cdf_starts) -> bytes:
    cdef Py_ssize_t n = sym_idx.shape[0]
    cdef bytearray renorm = bytearray()
    cdef uint64_t x = STATE_LOWER
    cdef uint64_t shift = (STATE_LOWER >> PROB_BITS) << 8
    cdef uint64_t start, freq, x_max
    cdef int64_t base, s
    cdef Py_ssize_t i
    cdef unsigned char[:] buf
    cdef Py_ssize_t pos

    # worst case 3 bytes per symbol of renorm output
    out = bytearray(3 * n + 4)
    buf = out
    pos = 3 * n + 4

    for i in range(n - 1, -1, -1):
        base = cdf_starts[table_of[i]]
        s = sym_idx[i]
        start = cdf_flat[base + s]
        freq = cdf_flat[base + s + 1] - start
        x_max = shift * freq
        while x >= x_max:
            pos -= 1
            buf[pos] = <uint8_t> (x & 0xFF)
            x >>= 8
        x = ((x / freq) << PROB_BITS) + (x % freq) + start

    cdef bytes flush = (<uint64_t> x).to_bytes(8, "little")[:4]
    return flush + bytes(out[pos:])


def kernel_decode(const unsigned char[::1] data, Py_ssize_t n, int64_t[::1] table_of,
                  uint32_t[::1] cdf_flat, int64_t[::1] cdf_starts):
    cdef Py_ssize_t size = data.shape[0]
    if size < 4:
        raise StreamError("stream shorter than the 4-byte state flush")
    cdef uint64_t x = (data[0] | (<uint64_t> data[1] << 8)
                       | (<uint64_t> data[2] << 16) | (<uint64_t> data[3] << 24))
    cdef Py_ssize_t pos = 4
    cdef int64_t base, lo, hi, mid, nsyms
    cdef uint64_t cf, start, freq
    cdef Py_ssize_t i

    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr

    for i in range(n):
        base = cdf_starts[table_of[i]]
        nsyms = cdf_starts[table_of[i] + 1] - base - 1
        cf = x & 0xFFFF
        lo = 0
        hi = nsyms  # find largest s with cdf[s] <= cf
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if cdf_flat[base + mid] <= cf:
                lo = mid
            else:
                hi = mid - 1
        start = cdf_flat[base + lo]
        freq = cdf_flat[base + lo + 1] - start
        x = freq * (x >> PROB_BITS) + cf - start
        while x < STATE_LOWER:
            if pos >= size:
                raise StreamError("stream truncated during renormalization")
            x = (x << 8) | data[pos]
            pos += 1
        out[i] = lo
    if x != STATE_LOWER:
        raise StreamError("decoder state did not return to the lower bound")
    return out_arr, pos
