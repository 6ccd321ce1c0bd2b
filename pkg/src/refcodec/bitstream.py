"""Serialized .rmc bitstream and the end-to-end encode/decode pipelines.

Layout (all integers little-endian):

  header   magic "RMC1" | version u8 | flags u8 | width u16 | height u16 |
           lambda_index u8 | refset_hash u32 | ref_i u16 | ref_j u16
  payload  per tile (one tile unless flags bit0): z chunk + 6 slice chunks,
           each chunk {support_radius u16, len u32, bytes}

Only quantization loses information: the decoder reproduces the encoder's
quantized latent bit-exactly from the stream, the shared reference set, and
the model weights.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import entropy as ent
from .cdf import CdfTable, build_cdf, build_cdf_from_pmf
from .networks import ActivationMeter, CodecModel, encode_features, reconstruct
from .tensors import ContractError, ImageTensor, match_reference, pad_image, pad_image_to_tiles

MAGIC = b"RMC1"
FORMAT_VERSION = 1
HEADER_FMT = "<4sBBHHBIHH"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
SLICE_COUNT = 6

FLAG_BLOCK_MODE = 1
FLAG_REF_ENTROPY_ABLATED = 2
FLAG_REF_DECODER_ABLATED = 4

BLOCK_W = 320
BLOCK_H = 192


class FormatError(ValueError):
    """Malformed or mismatched bitstream bytes."""


class ConfigMismatchError(ValueError):
    """Decoder-side model/reference configuration disagrees with the header."""


@dataclass
class RmcHeader:
    width: int
    height: int
    lambda_index: int
    refset_hash: int
    ref_i: int
    ref_j: int
    flags: int = 0
    version: int = FORMAT_VERSION

    def pack(self) -> bytes:
        return struct.pack(
            HEADER_FMT,
            MAGIC,
            self.version,
            self.flags,
            self.width,
            self.height,
            self.lambda_index,
            self.refset_hash,
            self.ref_i,
            self.ref_j,
        )

    @staticmethod
    def parse(data: bytes) -> "RmcHeader":
        if len(data) < HEADER_SIZE:
            raise FormatError("truncated header")
        magic, version, flags, width, height, lam, rhash, ri, rj = struct.unpack_from(
            HEADER_FMT, data
        )
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        return RmcHeader(width, height, lam, rhash, ri, rj, flags=flags, version=version)

    @property
    def block_mode(self) -> bool:
        return bool(self.flags & FLAG_BLOCK_MODE)


@dataclass
class Chunk:
    support_radius: int
    data: bytes

    def pack(self) -> bytes:
        return struct.pack("<HI", self.support_radius, len(self.data)) + self.data


@dataclass
class TileStream:
    z_chunk: Chunk
    slice_chunks: list[Chunk]


@dataclass
class EncodeStats:
    estimated_bits_y: float = 0.0
    estimated_bits_z: float = 0.0
    payload_bits: int = 0
    peak_activation: int = 0

    @property
    def estimated_bits(self) -> float:
        return self.estimated_bits_y + self.estimated_bits_z


@dataclass
class RmcFile:
    header: RmcHeader
    tiles: list[TileStream]
    stats: EncodeStats | None = field(default=None, compare=False)

    def pack(self) -> bytes:
        out = bytearray(self.header.pack())
        for tile in self.tiles:
            out += tile.z_chunk.pack()
            for c in tile.slice_chunks:
                out += c.pack()
        return bytes(out)

    @staticmethod
    def parse(data: bytes) -> "RmcFile":
        header = RmcHeader.parse(data)
        pos = HEADER_SIZE
        n_tiles = _tile_grid(header)[0] * _tile_grid(header)[1] if header.block_mode else 1

        def read_chunk():
            nonlocal pos
            if pos + 6 > len(data):
                raise FormatError("truncated chunk header")
            radius, length = struct.unpack_from("<HI", data, pos)
            pos += 6
            if pos + length > len(data):
                raise FormatError("chunk payload exceeds file size")
            payload = data[pos : pos + length]
            pos += length
            return Chunk(radius, payload)

        tiles = []
        for _ in range(n_tiles):
            z = read_chunk()
            slices = [read_chunk() for _ in range(SLICE_COUNT)]
            tiles.append(TileStream(z, slices))
        if pos != len(data):
            raise FormatError("trailing bytes after final chunk")
        return RmcFile(header, tiles)

    @property
    def payload_bits(self) -> int:
        return 8 * sum(
            len(t.z_chunk.data) + sum(len(c.data) for c in t.slice_chunks) for t in self.tiles
        )


def _tile_grid(header: RmcHeader) -> tuple[int, int]:
    nx = math.ceil(header.width / BLOCK_W)
    ny = math.ceil(header.height / BLOCK_H)
    return nx, ny


def model_flags(model: CodecModel, block_mode: bool) -> int:
    flags = FLAG_BLOCK_MODE if block_mode else 0
    if not model.cfg.use_ref_entropy:
        flags |= FLAG_REF_ENTROPY_ABLATED
    if not model.cfg.use_ref_decoder:
        flags |= FLAG_REF_DECODER_ABLATED
    return flags


def _z_tables(model: CodecModel, radius: int) -> list[CdfTable]:
    pmf = model.entropy.prior.pmf_table(radius).numpy()
    return [build_cdf_from_pmf(pmf[c], offset=-radius) for c in range(pmf.shape[0])]


def _gaussian_table_set(sigma_idx: np.ndarray, radius: int):
    """Tables for the scale-grid indices present, plus the per-symbol mapping."""
    grid = ent.scale_grid().numpy()
    unique = np.unique(sigma_idx)
    tables = [build_cdf(float(grid[g]), radius) for g in unique]
    remap = np.searchsorted(unique, sigma_idx)
    return tables, remap


def _code_tile(model, x_t, y_ref, coder, meter: ActivationMeter | None):
    """Encode one padded tile; returns (TileStream, est_bits_y, est_bits_z)."""
    e = model.entropy
    cfg = model.cfg
    if meter is not None:
        meter.note(x_t)
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        y = encode_features(model, x_t.unsqueeze(0).to(dtype))
        z = e.hyper_analysis(y)
        v_z = ent.round_half_away(z)
        radius_z = max(1, int(v_z.abs().max().item()), e.prior.coverage_radius())
        sym_z = v_z.to(torch.int64).flatten().numpy()
        idx_z = np.repeat(np.arange(z.shape[1]), z.shape[2] * z.shape[3])
        z_bytes = coder.encode(sym_z, idx_z, _z_tables(model, radius_z))
        est_z = float(ent.factorized_bits(e.prior, v_z).item())

        mu_h, sigma_h = e.hyper_params(v_z)
        if cfg.use_ref_entropy and y_ref is not None:
            mu_r, sigma_r = e.ref_params(y_ref.unsqueeze(0))
        else:
            mu_r, sigma_r = e.constant_ref_params(mu_h)
        params = ent.EntropyParams(mu_h, sigma_h, mu_r, sigma_r)

        slices = ent.split_slices(y, cfg.num_slices)
        decoded = []
        chunks = []
        est_y = 0.0
        for k, y_k in enumerate(slices):
            mu_k, sigma_k = e.slice_params(params, decoded, k)
            v_k = ent.round_half_away(y_k - mu_k)
            y_k_hat = v_k + mu_k
            radius = max(1, int(v_k.abs().max().item()))
            sig_idx = ent.scale_to_index(sigma_k).flatten().numpy()
            tables, remap = _gaussian_table_set(sig_idx, radius)
            payload = coder.encode(v_k.to(torch.int64).flatten().numpy(), remap, tables)
            chunks.append(Chunk(radius, payload))
            est_y += float(ent.gaussian_bits(y_k_hat, mu_k, sigma_k).item())
            decoded.append(y_k_hat)
        y_hat = torch.cat(decoded, dim=1).squeeze(0)
    return TileStream(Chunk(radius_z, z_bytes), chunks), y_hat, est_y, est_z


def _decode_tile(model, tile: TileStream, y_ref, dims, coder):
    """Reverse of _code_tile; reproduces the encoder's quantized latent bit-exactly."""
    e = model.entropy
    cfg = model.cfg
    h16, w16 = dims[0] // 16, dims[1] // 16
    h64, w64 = dims[0] // 64, dims[1] // 64
    with torch.no_grad():
        radius_z = tile.z_chunk.support_radius
        n_z = cfg.hyper_ch * h64 * w64
        idx_z = np.repeat(np.arange(cfg.hyper_ch), h64 * w64)
        sym_z = coder.decode(tile.z_chunk.data, idx_z, _z_tables(model, radius_z), n_z)
        v_z = torch.from_numpy(sym_z.astype(np.float32)).reshape(1, cfg.hyper_ch, h64, w64)
        v_z = v_z.to(next(model.parameters()).dtype)

        mu_h, sigma_h = e.hyper_params(v_z)
        if cfg.use_ref_entropy and y_ref is not None:
            mu_r, sigma_r = e.ref_params(y_ref.unsqueeze(0))
        else:
            mu_r, sigma_r = e.constant_ref_params(mu_h)
        params = ent.EntropyParams(mu_h, sigma_h, mu_r, sigma_r)

        decoded = []
        for k, chunk in enumerate(tile.slice_chunks):
            mu_k, sigma_k = e.slice_params(params, decoded, k)
            sig_idx = ent.scale_to_index(sigma_k).flatten().numpy()
            tables, remap = _gaussian_table_set(sig_idx, chunk.support_radius)
            n_k = cfg.slice_ch * h16 * w16
            v_k = coder.decode(chunk.data, remap, tables, n_k)
            v_k = torch.from_numpy(v_k.astype(np.float32)).reshape(1, cfg.slice_ch, h16, w16)
            decoded.append(v_k.to(mu_k.dtype) + mu_k)
        return torch.cat(decoded, dim=1).squeeze(0)


def _tile_tensors(img: ImageTensor, block_mode: bool):
    """Yield (tile tensor, (row, col) origin) in row-major order."""
    data = torch.from_numpy(img.data)
    if not block_mode:
        yield data, (0, 0)
        return
    for top in range(0, img.padded_h, BLOCK_H):
        for left in range(0, img.padded_w, BLOCK_W):
            yield data[:, top : top + BLOCK_H, left : left + BLOCK_W], (top, left)


def encode_image(
    model: CodecModel,
    image: ImageTensor,
    refs: tuple[int, int],
    refset,
    refcache=None,
    coder=None,
    block_mode: bool = False,
    meter: ActivationMeter | None = None,
) -> RmcFile:
    """Full encoder pipeline: pad, transform, entropy-code, serialize.

    `refs` = (deep index i for entropy, shallow index j for decoding); the
    indices travel in the header, the images themselves never do.
    """
    from .rans import get_coder

    coder = coder or get_coder()
    if refcache is not None and refcache.lambda_index != model.lambda_index:
        raise ConfigMismatchError("reference cache was built for a different lambda index")
    i, j = refs
    if i >= len(refset) or j >= len(refset):
        raise ContractError("reference index outside the reference set")

    if block_mode:
        padded = pad_image_to_tiles(image.cropped(), BLOCK_W, BLOCK_H)
        tile_dims = (BLOCK_H, BLOCK_W)
    else:
        padded = pad_image(image.cropped())
        tile_dims = (padded.padded_h, padded.padded_w)

    y_ref = None
    if model.cfg.use_ref_entropy:
        y_ref = _reference_latent(model, refset, refcache, i, tile_dims)

    header = RmcHeader(
        width=image.true_w,
        height=image.true_h,
        lambda_index=model.lambda_index,
        refset_hash=refset.hash,
        ref_i=i,
        ref_j=j,
        flags=model_flags(model, block_mode),
    )
    hooks = []
    if meter is not None:
        def _note(_mod, _inp, out):
            if isinstance(out, torch.Tensor):
                meter.note(out)

        hooks = [m.register_forward_hook(_note) for m in model.modules()]
    tiles = []
    est_y = est_z = 0.0
    try:
        for x_t, _ in _tile_tensors(padded, block_mode):
            stream, _, by, bz = _code_tile(model, x_t, y_ref, coder, meter)
            tiles.append(stream)
            est_y += by
            est_z += bz
    finally:
        for h in hooks:
            h.remove()
    rmc = RmcFile(header, tiles)
    rmc.stats = EncodeStats(
        estimated_bits_y=est_y,
        estimated_bits_z=est_z,
        payload_bits=rmc.payload_bits,
        peak_activation=meter.max_numel if meter is not None else 0,
    )
    return rmc


def decode_image(model: CodecModel, rmc: RmcFile, refset, refcache=None, coder=None) -> ImageTensor:
    """Full decoder pipeline; validates configuration before any arithmetic."""
    from .rans import get_coder

    coder = coder or get_coder()
    header = rmc.header
    if header.refset_hash != refset.hash:
        raise ConfigMismatchError(
            f"reference-set hash mismatch (stream {header.refset_hash:#x}, local {refset.hash:#x})"
        )
    if header.lambda_index != model.lambda_index:
        raise ConfigMismatchError(
            f"model lambda index {model.lambda_index} != stream {header.lambda_index}"
        )
    if bool(header.flags & FLAG_REF_ENTROPY_ABLATED) == model.cfg.use_ref_entropy:
        raise ConfigMismatchError("stream/model disagree on the ref-entropy path")
    if bool(header.flags & FLAG_REF_DECODER_ABLATED) == model.cfg.use_ref_decoder:
        raise ConfigMismatchError("stream/model disagree on the ref-decoder path")

    if header.block_mode:
        tile_dims = (BLOCK_H, BLOCK_W)
        nx, ny = _tile_grid(header)
        frame_h, frame_w = ny * BLOCK_H, nx * BLOCK_W
    else:
        frame_h = -(-header.height // 64) * 64
        frame_w = -(-header.width // 64) * 64
        tile_dims = (frame_h, frame_w)
        nx = ny = 1
    if len(rmc.tiles) != nx * ny:
        raise FormatError("tile count disagrees with header dims")

    y_ref = None
    if model.cfg.use_ref_entropy:
        y_ref = _reference_latent(model, refset, refcache, header.ref_i, tile_dims)
    x_ref_j = None
    if model.cfg.use_ref_decoder:
        ref_img = refset.load(header.ref_j)
        x_ref_j = torch.from_numpy(
            match_reference(ref_img, _blank_image(tile_dims)).data
        ).to(next(model.parameters()).dtype)

    frame = torch.zeros(3, frame_h, frame_w)
    idx = 0
    with torch.no_grad():
        for top in range(0, frame_h, tile_dims[0]):
            for left in range(0, frame_w, tile_dims[1]):
                y_hat = _decode_tile(model, rmc.tiles[idx], y_ref, tile_dims, coder)
                x_hat = reconstruct(model, y_hat, x_ref_j)
                frame[:, top : top + tile_dims[0], left : left + tile_dims[1]] = x_hat
                idx += 1
    out = ImageTensor(
        frame.numpy(),
        true_h=header.height,
        true_w=header.width,
        pad=(0, frame_h - header.height, 0, frame_w - header.width),
    )
    return ImageTensor(np.ascontiguousarray(out.cropped()), header.height, header.width)


def decoded_latents(model: CodecModel, rmc: RmcFile, refset, refcache=None, coder=None):
    """Decode just the quantized latents (one per tile), for transport checks."""
    from .rans import get_coder

    coder = coder or get_coder()
    header = rmc.header
    if header.block_mode:
        tile_dims = (BLOCK_H, BLOCK_W)
    else:
        tile_dims = (-(-header.height // 64) * 64, -(-header.width // 64) * 64)
    y_ref = None
    if model.cfg.use_ref_entropy:
        y_ref = _reference_latent(model, refset, refcache, header.ref_i, tile_dims)
    return [_decode_tile(model, tile, y_ref, tile_dims, coder) for tile in rmc.tiles]


def _reference_latent(model, refset, refcache, index, dims):
    if refcache is not None:
        return refcache.latent(index, dims)
    ref_img = refset.load(index)
    matched = match_reference(ref_img, _blank_image(dims))
    with torch.no_grad():
        return encode_features(model, matched)


def _blank_image(dims) -> ImageTensor:
    h, w = dims
    return ImageTensor(np.zeros((3, h, w), dtype=np.float32), true_h=h, true_w=w)
