"""Entropy-coder backends.

The in-process "reference" coder prefers a compiled Cython kernel and falls
back to pure Python when the extension is unavailable (both are byte-exact;
set REFCODEC_PURE=1 to force the fallback).  An out-of-process "accelerated"
backend can be loaded from a shared library honouring the same contract.
"""

from __future__ import annotations

import os

import numpy as np

from ..cdf import CdfTable
from ..tensors import ContractError
from ._pure import CONTRACT_VERSION, StreamError
from ._pure import kernel_decode as _pure_decode
from ._pure import kernel_encode as _pure_encode

if os.environ.get("REFCODEC_PURE"):
    _impl = "pure"
    _kernel_encode, _kernel_decode = None, None
else:
    try:
        from ._core import kernel_decode as _kernel_decode
        from ._core import kernel_encode as _kernel_encode

        _impl = "cython"
    except ImportError:
        _impl = "pure"
        _kernel_encode, _kernel_decode = None, None


def kernel_name() -> str:
    return _impl


def _flatten_tables(tables: list[CdfTable]):
    starts = np.zeros(len(tables) + 1, dtype=np.int64)
    for i, t in enumerate(tables):
        starts[i + 1] = starts[i] + len(t.cdf)
    flat = np.concatenate([t.cdf for t in tables]).astype(np.uint32)
    offsets = np.array([t.offset for t in tables], dtype=np.int64)
    sizes = np.array([t.num_symbols for t in tables], dtype=np.int64)
    return flat, starts, offsets, sizes


def _encode_impl(values, table_indices, tables: list[CdfTable], impl: str) -> bytes:
    values = np.asarray(values, dtype=np.int64).ravel()
    table_of = np.asarray(table_indices, dtype=np.int64).ravel()
    if values.shape != table_of.shape:
        raise ContractError("values and table indices must align")
    flat, starts, offsets, sizes = _flatten_tables(tables)
    if len(table_of) and (table_of.min() < 0 or table_of.max() >= len(tables)):
        raise ContractError("table index out of range")
    idx = values - offsets[table_of]
    np.clip(idx, 0, sizes[table_of] - 1, out=idx)
    if impl == "cython":
        return _kernel_encode(idx, table_of, flat, starts)
    cdfs = [t.cdf.tolist() for t in tables]
    return _pure_encode(idx.tolist(), table_of.tolist(), cdfs)


def _decode_impl(data: bytes, table_indices, tables: list[CdfTable], n: int, impl: str):
    table_of = np.asarray(table_indices, dtype=np.int64).ravel()
    if len(table_of) != n:
        raise ContractError("need one table index per symbol")
    flat, starts, offsets, _ = _flatten_tables(tables)
    if n and (table_of.min() < 0 or table_of.max() >= len(tables)):
        raise ContractError("table index out of range")
    if impl == "cython":
        idx, pos = _kernel_decode(data, n, table_of, flat, starts)
        idx = np.asarray(idx, dtype=np.int64)
    else:
        cdfs = [t.cdf.tolist() for t in tables]
        out, pos = _pure_decode(data, n, table_of.tolist(), cdfs)
        idx = np.array(out, dtype=np.int64)
    if pos != len(data):
        raise StreamError(f"{len(data) - pos} unconsumed bytes after decode")
    return idx + offsets[table_of]


def rans_encode(values, table_indices, tables: list[CdfTable]) -> bytes:
    """Encode integer symbol values, each against its own table.

    Values are clamped to their table's support; the support radius is chosen
    from the data upstream so clamping never actually alters a symbol.
    """
    return _encode_impl(values, table_indices, tables, _impl)


def rans_decode(data: bytes, table_indices, tables: list[CdfTable], n: int) -> np.ndarray:
    """Exact inverse of rans_encode; returns int64 symbol values."""
    return _decode_impl(data, table_indices, tables, n, _impl)


class ReferenceCoder:
    """The in-process coder (normative byte output)."""

    name = "reference"
    version = CONTRACT_VERSION

    @staticmethod
    def encode(values, table_indices, tables) -> bytes:
        return rans_encode(values, table_indices, tables)

    @staticmethod
    def decode(data, table_indices, tables, n) -> np.ndarray:
        return rans_decode(data, table_indices, tables, n)


class PureCoder:
    """Reference coder pinned to the pure-Python kernel (conformance/benchmarks)."""

    name = "pure"
    version = CONTRACT_VERSION

    @staticmethod
    def encode(values, table_indices, tables) -> bytes:
        return _encode_impl(values, table_indices, tables, "pure")

    @staticmethod
    def decode(data, table_indices, tables, n) -> np.ndarray:
        return _decode_impl(data, table_indices, tables, n, "pure")


def get_coder(name: str = "reference"):
    if name == "reference":
        return ReferenceCoder()
    if name == "accelerated":
        from .accelerated import AcceleratedCoder

        return AcceleratedCoder.load()
    raise ContractError(f"unknown coder backend {name!r}")
