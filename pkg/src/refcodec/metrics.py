"""Quality metrics, Bjontegaard deltas, R-D sweeps, and MAC accounting.

BD metrics follow the classic definition: cubic polynomial fit of quality
against log10(rate) (or the inverse fit for BD-rate), with the difference
integrated exactly over the overlapping interval.  MAC reports follow the
FLOPs = 2*MACs convention and include the selection-distance cost on the
encoder side; reference-only computation is excluded there because those
features are precomputed and stored.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .entropy import (
    hyper_analysis_description,
    hyper_synthesis_description,
    ref_entropy_description,
    slice_net_description,
)
from .layers import count_macs
from .networks import (
    ModelConfig,
    encoder_description,
    encoder_macs,
    input_decoder_macs,
    ref_decoder_macs,
)
from .tensors import ContractError

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_MIN_DIM = 176


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give +inf."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractError("PSNR inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_pass(a: np.ndarray, b: np.ndarray, window: np.ndarray, peak: float):
    """Mean SSIM and contrast-structure terms of one channel at one scale."""
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    aa = convolve2d(a * a, window, mode="valid") - mu_a**2
    bb = convolve2d(b * b, window, mode="valid") - mu_b**2
    ab = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
    cs = (2 * ab + c2) / (aa + bb + c2)
    ssim = ((2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)) * cs
    return float(ssim.mean()), float(cs.mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """5-scale MS-SSIM with the standard weights and an 11x11 Gaussian window."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractError("MS-SSIM inputs must share a shape")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2], a.shape[-1]) < MSSSIM_MIN_DIM:
        raise ContractError(f"MS-SSIM needs min dim >= {MSSSIM_MIN_DIM}")
    window = _gaussian_window()
    per_channel = []
    for c in range(a.shape[0]):
        xa, xb = a[c], b[c]
        terms = []
        for scale in range(len(MSSSIM_WEIGHTS)):
            ssim_val, cs_val = _ssim_pass(xa, xb, window, peak)
            terms.append(ssim_val if scale == len(MSSSIM_WEIGHTS) - 1 else cs_val)
            if scale < len(MSSSIM_WEIGHTS) - 1:
                xa, xb = _downsample2(xa), _downsample2(xb)
        value = 1.0
        for t, wgt in zip(terms, MSSSIM_WEIGHTS):
            value *= max(t, 0.0) ** wgt
        per_channel.append(value)
    return float(np.mean(per_channel))


def db_scale(x: float) -> float:
    """-10*log10(1 - x); x = 1 gives +inf."""
    if x >= 1.0:
        return float("inf")
    return -10.0 * math.log10(1.0 - x)


def ms_ssim_db(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    return db_scale(ms_ssim(a, b, peak))


# ---------------------------------------------------------------------------
# Bjontegaard deltas


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    msssim_db: float = 0.0

    def __post_init__(self):
        if self.bpp <= 0:
            raise ContractError("bpp must be positive")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint]

    def __post_init__(self):
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ContractError("curve bpp must be strictly increasing")

    def quality(self, field: str) -> np.ndarray:
        return np.array([getattr(p, field) for p in self.points], dtype=np.float64)

    def log_rate(self) -> np.ndarray:
        return np.log10([p.bpp for p in self.points])


def _fit_and_average(x1, y1, x2, y2) -> float:
    """Average (curve2 - curve1) over the overlapping x range via cubic fits."""
    lo = max(x1.min(), x2.min())
    hi = min(x1.max(), x2.max())
    if hi <= lo:
        raise ContractError("rate-distortion curves do not overlap")
    p1 = np.polyfit(x1, y1, 3)
    p2 = np.polyfit(x2, y2, 3)
    int1 = np.polyint(p1)
    int2 = np.polyint(p2)
    area1 = np.polyval(int1, hi) - np.polyval(int1, lo)
    area2 = np.polyval(int2, hi) - np.polyval(int2, lo)
    return (area2 - area1) / (hi - lo)


def bd_metric(anchor: RDCurve, test: RDCurve, mode: str, quality_field: str = "psnr") -> float:
    """BD-quality in dB, or BD-rate in percent (negative = bits saved)."""
    if len(anchor.points) < 4 or len(test.points) < 4:
        raise ContractError("BD metrics need at least 4 points per curve")
    qa = anchor.quality(quality_field)
    qt = test.quality(quality_field)
    ra = anchor.log_rate()
    rt = test.log_rate()
    if mode == "quality":
        return _fit_and_average(ra, qa, rt, qt)
    if mode == "rate":
        avg_log_diff = _fit_and_average(qa, ra, qt, rt)
        return (10.0**avg_log_diff - 1.0) * 100.0
    raise ContractError(f"unknown BD mode {mode!r}")


# ---------------------------------------------------------------------------
# R-D sweep over actual bitstreams


def rd_sweep(models, testset, refset, coder=None, base_model=None, cache_by_model=None):
    """Encode every test image with every model; bpp from real file sizes.

    Returns (list of RDCurve points sorted by bpp, csv text).  `models` is a
    list of (label, lambda, model, (i, j) chooser) tuples produced by the CLI,
    or plain CodecModel objects with shared reference indices.
    """
    from .bitstream import decode_image, encode_image
    from .selector import build_cache

    rows = []
    points = []
    for label, lmbda, model, select in models:
        cache = None
        if cache_by_model is not None:
            cache = cache_by_model.get(label)
        if cache is None:
            cache = build_cache(model, base_model, refset)
        total_bits = 0
        total_pixels = 0
        psnrs = []
        msssims = []
        for img in testset:
            i, j = select(img)
            rmc = encode_image(model, img, (i, j), refset, refcache=cache, coder=coder)
            data = rmc.pack()
            rec = decode_image(model, type(rmc).parse(data), refset, refcache=cache, coder=coder)
            total_bits += 8 * len(data)
            total_pixels += img.true_h * img.true_w
            psnrs.append(psnr(img.cropped(), rec.cropped()))
            if min(img.true_h, img.true_w) >= MSSSIM_MIN_DIM:
                msssims.append(ms_ssim_db(img.cropped(), rec.cropped()))
        bpp = total_bits / total_pixels
        point = RDPoint(bpp, float(np.mean(psnrs)), float(np.mean(msssims)) if msssims else 0.0)
        points.append((label, lmbda, point))
        rows.append([label, lmbda, f"{bpp:.6f}", f"{point.psnr:.4f}", f"{point.msssim_db:.4f}"])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_label", "lambda", "bpp", "psnr_db", "msssim_db"])
    w.writerows(rows)
    points.sort(key=lambda t: t[2].bpp)
    curve = None
    if len(points) >= 2:
        try:
            curve = RDCurve("sweep", [p for _, _, p in points])
        except ContractError:
            pass  # tied bpp points: CSV still stands, no curve
    return curve, buf.getvalue()


# ---------------------------------------------------------------------------
# MAC accounting


def selection_distance_macs(cfg: ModelConfig, n_refs: int, h: int, w: int, deep: bool) -> int:
    """One MAC per element per candidate for the L1/L2 selection distances."""
    if deep:
        return n_refs * cfg.latent_ch * (h // 16) * (w // 16)
    return n_refs * cfg.latent_ch * (h // 2) * (w // 2)


def pre_encoder_shallow_macs(cfg: ModelConfig, h: int, w: int) -> int:
    return count_macs(encoder_description(cfg)[:1], h, w)


def pre_encoder_deep_macs(cfg: ModelConfig, h: int, w: int) -> int:
    return count_macs(encoder_description(cfg)[1:], h // 2, w // 2)


def entropy_encoder_macs(cfg: ModelConfig, h: int, w: int) -> int:
    """Input-side entropy nets: hyper analysis + both hyper synths + slice nets."""
    h16, w16 = h // 16, w // 16
    total = count_macs(hyper_analysis_description(cfg), h16, w16)
    total += 2 * count_macs(hyper_synthesis_description(cfg), h // 64, w // 64)
    for k in range(cfg.num_slices):
        total += 2 * count_macs(slice_net_description(cfg, k), h16, w16)
    return total


def entropy_decoder_macs(cfg: ModelConfig, h: int, w: int) -> int:
    """Decoder-side entropy nets: hyper synths + ref nets + slice nets."""
    h16, w16 = h // 16, w // 16
    total = 2 * count_macs(hyper_synthesis_description(cfg), h // 64, w // 64)
    if cfg.use_ref_entropy:
        total += 2 * count_macs(ref_entropy_description(cfg), h16, w16)
    for k in range(cfg.num_slices):
        total += 2 * count_macs(slice_net_description(cfg, k), h16, w16)
    return total


def flops_report(
    cfg: ModelConfig,
    base_cfg: ModelConfig,
    w: int,
    h: int,
    stage: str,
    n_refs: int = 386,
) -> dict:
    """Encoder/decoder MAC totals for one coded frame.

    Encoder side: input-encoder, input-side entropy nets, selection distances,
    the pre-encoder shallow stage, and (pretrain pipeline only) the
    pre-encoder deep stages.  Reference-only computation is excluded: those
    features are precomputed and stored.  Decoder side: input-decoder,
    ref-decoder, the ref-encoder replay, and decoder-side entropy nets.
    """
    if stage not in ("pretrain_pipeline", "recycled_pipeline"):
        raise ContractError(f"unknown pipeline stage {stage!r}")
    if h % 64 or w % 64:
        raise ContractError("dims must be multiples of 64")

    enc = encoder_macs(cfg, h, w)
    enc += entropy_encoder_macs(cfg, h, w)
    enc += pre_encoder_shallow_macs(base_cfg, h, w)
    enc += selection_distance_macs(base_cfg, n_refs, h, w, deep=False)
    enc += selection_distance_macs(cfg, n_refs, h, w, deep=True)
    if stage == "pretrain_pipeline":
        enc += pre_encoder_deep_macs(base_cfg, h, w)

    dec = input_decoder_macs(cfg, h, w)
    if cfg.use_ref_decoder:
        dec += ref_decoder_macs(cfg, h, w)
    if cfg.use_ref_entropy:
        dec += encoder_macs(cfg, h, w)  # ref-encoder replay on the reference image
    dec += entropy_decoder_macs(cfg, h, w)

    return {
        "encoder_macs": enc,
        "decoder_macs": dec,
        "ratio": dec / enc,
        "convention": "FLOPs = 2*MACs",
    }


def write_rd_svg(csv_text: str, path):
    """Line chart of the R-D CSV (bpp vs PSNR), written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [line.split(",") for line in csv_text.strip().splitlines()[1:]]
    pts = sorted((float(r[2]), float(r[3]), r[0]) for r in rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
    for bpp, q, label in pts:
        ax.annotate(label, (bpp, q), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def flops_report_text(report: dict) -> str:
    lines = [
        "# MAC accounting (FLOPs = 2*MACs)",
        f"encoder_macs: {report['encoder_macs']}",
        f"decoder_macs: {report['decoder_macs']}",
        f"encoder_gflops: {2 * report['encoder_macs'] / 1e9:.2f}",
        f"decoder_gflops: {2 * report['decoder_macs'] / 1e9:.2f}",
        f"decoder_to_encoder_ratio: {report['ratio']:.3f}",
    ]
    return "\n".join(lines) + "\n"
