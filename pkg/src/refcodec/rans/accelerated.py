"""ctypes binding for the accelerated out-of-process coder backend.

The backend is a shared library exchanging flat byte buffers: a TableBlob,
an i32 symbol buffer, and a u32 per-symbol table-index buffer.  It must be
byte-identical to the reference coder; nothing here depends on it being
faster.  Library lookup order: REFCODEC_ACCEL_LIB, then the rans-backend
build tree next to this repository.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from ..cdf import pack_tables
from ..tensors import ContractError
from ._pure import StreamError

_ERRORS = {
    1: "malformed table blob",
    2: "output capacity too small",
    3: "corrupt or truncated stream",
    4: "bad arguments",
}


def _candidate_paths():
    env = os.environ.get("REFCODEC_ACCEL_LIB")
    if env:
        yield Path(env)
    root = Path(__file__).resolve().parents[3]
    for tree in (root, root.parent):
        for profile in ("release", "debug"):
            yield tree / "rans-backend" / "target" / profile / "librans_backend.so"


class AcceleratedCoder:
    name = "accelerated"

    def __init__(self, lib: ctypes.CDLL):
        self._lib = lib
        lib.rans_backend_version.restype = ctypes.c_char_p
        lib.rans_backend_encode.restype = ctypes.c_int32
        lib.rans_backend_decode.restype = ctypes.c_int32
        lib.rans_backend_selftest.restype = ctypes.c_int32
        self.version = lib.rans_backend_version().decode()

    @classmethod
    def load(cls) -> "AcceleratedCoder":
        for path in _candidate_paths():
            if path.is_file():
                return cls(ctypes.CDLL(str(path)))
        raise ContractError(
            "accelerated coder library not found; build rans-backend or set REFCODEC_ACCEL_LIB"
        )

    @classmethod
    def available(cls) -> bool:
        return any(p.is_file() for p in _candidate_paths())

    def encode(self, values, table_indices, tables) -> bytes:
        values = np.ascontiguousarray(values, dtype=np.int32).ravel()
        idx = np.ascontiguousarray(table_indices, dtype=np.uint32).ravel()
        if values.shape != idx.shape:
            raise ContractError("values and table indices must align")
        blob = pack_tables(tables)
        cap = 3 * len(values) + 16
        out = np.empty(cap, dtype=np.uint8)
        out_len = ctypes.c_uint64(0)
        rc = self._lib.rans_backend_encode(
            values.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            ctypes.c_uint64(len(values)),
            blob,
            ctypes.c_uint64(len(blob)),
            idx.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
            ctypes.c_uint64(cap),
            ctypes.byref(out_len),
        )
        self._check(rc)
        return out[: out_len.value].tobytes()

    def decode(self, data: bytes, table_indices, tables, n: int) -> np.ndarray:
        idx = np.ascontiguousarray(table_indices, dtype=np.uint32).ravel()
        if len(idx) != n:
            raise ContractError("need one table index per symbol")
        blob = pack_tables(tables)
        out = np.empty(n, dtype=np.int32)
        rc = self._lib.rans_backend_decode(
            data,
            ctypes.c_uint64(len(data)),
            blob,
            ctypes.c_uint64(len(blob)),
            idx.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.c_uint64(n),
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
        )
        self._check(rc)
        return out.astype(np.int64)

    def selftest(self) -> str:
        cap = 1 << 16
        buf = ctypes.create_string_buffer(cap)
        length = ctypes.c_uint64(0)
        rc = self._lib.rans_backend_selftest(buf, ctypes.c_uint64(cap), ctypes.byref(length))
        report = buf.raw[: length.value].decode()
        if rc != 0:
            raise StreamError(f"backend selftest failed:\n{report}")
        return report

    @staticmethod
    def _check(rc: int):
        if rc == 0:
            return
        msg = _ERRORS.get(rc, f"backend error code {rc}")
        if rc == 3:
            raise StreamError(msg)
        raise ContractError(msg)
