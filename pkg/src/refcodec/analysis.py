"""Texture and color similarity analysis.

GLCM features use 32 gray levels, a distance-1 horizontal offset, symmetric
accumulation, and probability normalization; six standard statistics are
extracted and compared by min-max-normalized Euclidean distance.  Chroma
statistics run in CIE LAB (native units), analog BT.601 YUV ([0,1]-scale),
and full-range BT.601 YCbCr (8-bit terms).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .tensors import ContractError

GLCM_LEVELS = 32
GLCM_OFFSET = (0, 1)


@dataclass(frozen=True)
class GlcmFeatures:
    contrast: float
    dissimilarity: float
    homogeneity: float
    energy: float
    correlation: float
    asm: float

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.contrast,
                self.dissimilarity,
                self.homogeneity,
                self.energy,
                self.correlation,
                self.asm,
            ]
        )


def cooccurrence_counts(gray: np.ndarray, levels: int = GLCM_LEVELS, offset=GLCM_OFFSET):
    """Symmetric integer co-occurrence counts of an 8-bit single-channel image."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ContractError("GLCM input must be single-channel")
    dr, dc = offset
    h, w = gray.shape
    if h <= abs(dr) or w <= abs(dc):
        raise ContractError("image smaller than the co-occurrence offset")
    bins = (gray.astype(np.int64) * levels) // 256
    a = bins[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)]
    b = bins[max(0, dr) : h - max(0, -dr), max(0, dc) : w - max(0, -dc)]
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (a.ravel(), b.ravel()), 1)
    return counts + counts.T


def glcm_features(gray: np.ndarray, levels: int = GLCM_LEVELS, offset=GLCM_OFFSET) -> GlcmFeatures:
    counts = cooccurrence_counts(gray, levels, offset)
    p = counts.astype(np.float64) / counts.sum()
    i = np.arange(levels, dtype=np.float64)[:, None]
    j = np.arange(levels, dtype=np.float64)[None, :]
    diff = i - j
    contrast = float((p * diff**2).sum())
    dissimilarity = float((p * np.abs(diff)).sum())
    homogeneity = float((p / (1.0 + diff**2)).sum())
    asm = float((p**2).sum())
    energy = float(np.sqrt(asm))
    mu_i = float((p * i).sum())
    mu_j = float((p * j).sum())
    var_i = float((p * (i - mu_i) ** 2).sum())
    var_j = float((p * (j - mu_j) ** 2).sum())
    if var_i <= 0.0 or var_j <= 0.0:
        correlation = 1.0
    else:
        correlation = float((p * (i - mu_i) * (j - mu_j)).sum() / np.sqrt(var_i * var_j))
    return GlcmFeatures(contrast, dissimilarity, homogeneity, energy, correlation, asm)


class CorpusNormalizer:
    """Per-feature min-max ranges over the corpus under comparison."""

    def __init__(self, features: list[GlcmFeatures]):
        if not features:
            raise ContractError("normalizer needs at least one feature vector")
        stack = np.stack([f.vector() for f in features])
        self.lo = stack.min(axis=0)
        self.hi = stack.max(axis=0)

    def normalize(self, f: GlcmFeatures) -> np.ndarray:
        span = self.hi - self.lo
        span[span == 0] = 1.0
        return (f.vector() - self.lo) / span


def glcm_distance(a: GlcmFeatures, b: GlcmFeatures, normalizer: CorpusNormalizer) -> float:
    """L2 distance between min-max-normalized 6-vectors; 0 iff identical."""
    d = normalizer.normalize(a) - normalizer.normalize(b)
    return float(np.sqrt(np.sum(d * d)))


# ---------------------------------------------------------------------------
# color spaces

# full-range BT.601: Y'CbCr in 8-bit terms from R'G'B' in [0,1]
_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])

# analog BT.601 YUV, result stays on the [0,1] scale of the input
_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.299 * 0.492, -0.587 * 0.492, (1 - 0.114) * 0.492],
        [(1 - 0.299) * 0.877, -0.587 * 0.877, -0.114 * 0.877],
    ]
)

# sRGB -> XYZ (D65)
_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = _XYZ.sum(axis=1)  # white point: X_n, Y_n, Z_n of RGB=(1,1,1)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    d = 6.0 / 29.0
    return np.where(t > d**3, np.cbrt(t), t / (3 * d * d) + 4.0 / 29.0)


def to_colorspace(rgb: np.ndarray, space: str) -> np.ndarray:
    """Convert a (3, H, W) RGB image in [0,1] to LAB, YUV, or YCbCr."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ContractError("expected (3, H, W) RGB data")
    flat = rgb.reshape(3, -1)
    if space == "YCbCr":
        out = (_YCBCR @ flat) * 255.0 + _YCBCR_OFFSET[:, None]
        return out.reshape(rgb.shape)
    if space == "YUV":
        return (_YUV @ flat).reshape(rgb.shape)
    if space == "LAB":
        lin = _srgb_to_linear(flat)
        xyz = _XYZ @ lin
        fx, fy, fz = (_lab_f(xyz[c] / _D65[c]) for c in range(3))
        L = 116.0 * fy - 16.0
        a = 500.0 * (fx - fy)
        b = 200.0 * (fy - fz)
        return np.stack([L, a, b]).reshape(rgb.shape)
    raise ContractError(f"unknown color space {space!r}")


def from_ycbcr(ycbcr: np.ndarray) -> np.ndarray:
    """Exact inverse of the YCbCr conversion (round-trip check support)."""
    flat = np.asarray(ycbcr, dtype=np.float64).reshape(3, -1).copy()
    flat -= _YCBCR_OFFSET[:, None]
    rgb = np.linalg.solve(_YCBCR, flat / 255.0)
    return rgb.reshape(ycbcr.shape)


CHROMA_CHANNELS = {"LAB": ("a", "b"), "YUV": ("U", "V"), "YCbCr": ("Cb", "Cr")}


@dataclass(frozen=True)
class ChromaStats:
    space: str
    mean_c1: float
    mean_c2: float
    std_c1: float
    std_c2: float


def chroma_stats(rgb: np.ndarray, space: str) -> ChromaStats:
    """Per-chroma-channel mean and population std, in the space's native units."""
    conv = to_colorspace(rgb, space)
    c1, c2 = conv[1].ravel(), conv[2].ravel()
    return ChromaStats(
        space,
        float(c1.mean()),
        float(c2.mean()),
        float(c1.std()),
        float(c2.std()),
    )


# ---------------------------------------------------------------------------
# corpus reports


def _to_gray8(rgb: np.ndarray) -> np.ndarray:
    y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    return np.clip(np.rint(y * 255.0), 0, 255).astype(np.uint8)


def corpus_report(images: list[np.ndarray], mode: str) -> str:
    """CSV over a corpus of (3, H, W) images in [0,1].

    glcm_hist: one row per unordered pair with the normalized feature distance.
    chroma_violin_data: one row per image per space per chroma channel.
    """
    if len(images) < 2:
        raise ContractError("corpus reports need at least 2 images")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if mode == "glcm_hist":
        feats = [glcm_features(_to_gray8(im)) for im in images]
        norm = CorpusNormalizer(feats)
        w.writerow(["id_a", "id_b", "distance"])
        for a, b in combinations(range(len(images)), 2):
            w.writerow([a, b, f"{glcm_distance(feats[a], feats[b], norm):.9g}"])
    elif mode == "chroma_violin_data":
        w.writerow(["id", "space", "channel", "mean", "std"])
        for idx, im in enumerate(images):
            for space, (n1, n2) in CHROMA_CHANNELS.items():
                s = chroma_stats(im, space)
                w.writerow([idx, space, n1, f"{s.mean_c1:.9g}", f"{s.std_c1:.9g}"])
                w.writerow([idx, space, n2, f"{s.mean_c2:.9g}", f"{s.std_c2:.9g}"])
    else:
        raise ContractError(f"unknown report mode {mode!r}")
    return buf.getvalue()
