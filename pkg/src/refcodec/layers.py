"""Neural building blocks: GDN/IGDN, strided conv blocks, and MAC accounting.

Every convolution in the codec uses 3x3 kernels.  Downsampling blocks halve
the spatial dims, upsampling blocks double them (transposed conv with output
padding 1), and the composite blocks are:

  Tcov   - three stacked convolutions (first one strided) closed by a GDN
  CRBUp  - upsampling conv + residual block + plain conv; the trailing conv
           makes "zero final layer => zero output" hold exactly
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .tensors import ContractError

KERNEL = 3

GDN_PEDESTAL = 2.0**-18


def gdn_forward(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """y_c = x_c / sqrt(beta_c + sum_c' gamma_{c,c'} x_{c'}^2), per spatial position.

    x is (N, C, H, W) or (C, H, W); beta is (C,), gamma is (C, C).
    """
    _check_gdn_params(beta, gamma)
    beta, gamma = beta.to(x.dtype), gamma.to(x.dtype)
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    norm = torch.nn.functional.conv2d(x * x, gamma.unsqueeze(-1).unsqueeze(-1), beta)
    out = x * torch.rsqrt(norm)
    return out.squeeze(0) if squeeze else out


def igdn_forward(y: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Inverse transform: x_c = y_c * sqrt(beta_c + sum_c' gamma_{c,c'} y_{c'}^2)."""
    _check_gdn_params(beta, gamma)
    beta, gamma = beta.to(y.dtype), gamma.to(y.dtype)
    squeeze = y.dim() == 3
    if squeeze:
        y = y.unsqueeze(0)
    norm = torch.nn.functional.conv2d(y * y, gamma.unsqueeze(-1).unsqueeze(-1), beta)
    out = y * torch.sqrt(norm)
    return out.squeeze(0) if squeeze else out


def _check_gdn_params(beta, gamma):
    if (beta <= 0).any():
        raise ContractError("GDN beta must be strictly positive")
    if (gamma < 0).any():
        raise ContractError("GDN gamma must be non-negative")


class GDN(nn.Module):
    """Generalized divisive normalization with non-negative reparametrization.

    beta initialized to 1, gamma to 0.1*I.  Raw parameters are stored as
    sqrt(value + pedestal) and squared back on the forward pass, keeping the
    effective beta/gamma in their domains during training.
    """

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        ped = GDN_PEDESTAL
        self.beta_raw = nn.Parameter(torch.sqrt(torch.ones(channels) + ped))
        gamma0 = 0.1 * torch.eye(channels)
        self.gamma_raw = nn.Parameter(torch.sqrt(gamma0 + ped))
        self._bound = math.sqrt(ped)

    def effective_params(self):
        ped = GDN_PEDESTAL
        beta = torch.clamp(self.beta_raw, min=self._bound) ** 2 - ped
        gamma = torch.clamp(self.gamma_raw, min=self._bound) ** 2 - ped
        # the pedestal subtraction can leave tiny negatives from rounding
        return beta.clamp(min=1e-9), gamma.clamp(min=0.0)

    def forward(self, x):
        beta, gamma = self.effective_params()
        if self.inverse:
            return igdn_forward(x, beta, gamma)
        return gdn_forward(x, beta, gamma)


def conv3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, KERNEL, stride=stride, padding=1)


def upconv3(in_ch: int, out_ch: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_ch, out_ch, KERNEL, stride=2, padding=1, output_padding=1)


def orthogonal_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_init(layer: nn.Module):
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class ResBlock(nn.Module):
    """conv -> ReLU -> conv plus identity skip; shape preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3(channels, channels)
        self.conv2 = conv3(channels, channels)

    def forward(self, x):
        h = self.conv2(torch.relu(self.conv1(x)))
        return x + h


class Tcov(nn.Module):
    """Triple convolution (first strided) followed by a GDN."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 2):
        super().__init__()
        self.conv1 = conv3(in_ch, out_ch, stride=stride)
        self.conv2 = conv3(out_ch, out_ch)
        self.conv3 = conv3(out_ch, out_ch)
        self.gdn = GDN(out_ch)

    def forward(self, x):
        x = self.conv1(x)
        x = self.conv2(x)
        x = self.conv3(x)
        return self.gdn(x)


class CRBUp(nn.Module):
    """Upsampling conv + residual block + plain conv.

    Keeping the plain conv last means zeroing it zeroes the block output,
    which the residual-synthesis net relies on at init.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = upconv3(in_ch, out_ch)
        self.res = ResBlock(out_ch)
        self.conv = conv3(out_ch, out_ch)

    def forward(self, x):
        return self.conv(self.res(self.up(x)))


class ConvDown(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, has_norm: bool = True):
        super().__init__()
        self.conv = conv3(in_ch, out_ch, stride=2)
        self.norm = GDN(out_ch) if has_norm else None

    def forward(self, x):
        x = self.conv(x)
        return self.norm(x) if self.norm is not None else x


class ConvUp(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, has_norm: bool = True):
        super().__init__()
        self.conv = upconv3(in_ch, out_ch)
        self.norm = GDN(out_ch, inverse=True) if has_norm else None

    def forward(self, x):
        x = self.conv(x)
        return self.norm(x) if self.norm is not None else x


@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of one block, used for construction and MAC counts."""

    kind: str  # ConvDown | ConvUp | Tcov | CRBUp | ResBlock | Conv
    in_ch: int
    out_ch: int
    kernel: int = KERNEL
    stride: int = 1
    has_norm: bool = False

    def __post_init__(self):
        if self.kernel != KERNEL:
            raise ContractError("all codec convolutions use 3x3 kernels")
        if self.kind not in _BLOCK_KINDS:
            raise ContractError(f"unknown block kind {self.kind!r}")


_BLOCK_KINDS = ("ConvDown", "ConvUp", "Tcov", "CRBUp", "ResBlock", "Conv")


def make_block(spec: BlockSpec) -> nn.Module:
    if spec.kind == "ConvDown":
        return ConvDown(spec.in_ch, spec.out_ch, has_norm=spec.has_norm)
    if spec.kind == "ConvUp":
        return ConvUp(spec.in_ch, spec.out_ch, has_norm=spec.has_norm)
    if spec.kind == "Tcov":
        return Tcov(spec.in_ch, spec.out_ch)
    if spec.kind == "CRBUp":
        return CRBUp(spec.in_ch, spec.out_ch)
    if spec.kind == "ResBlock":
        if spec.in_ch != spec.out_ch:
            raise ContractError("ResBlock preserves channel count")
        return ResBlock(spec.in_ch)
    return conv3(spec.in_ch, spec.out_ch, stride=spec.stride)


def apply_block(spec: BlockSpec, t: torch.Tensor, module: nn.Module | None = None) -> torch.Tensor:
    """Apply a block described by `spec` to a (C, H, W) or (N, C, H, W) field."""
    ch = t.shape[-3]
    if ch != spec.in_ch:
        raise ContractError(f"block expects {spec.in_ch} channels, got {ch}")
    if module is None:
        module = make_block(spec).to(t.dtype)
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    out = module(t)
    return out.squeeze(0) if squeeze else out


def conv_macs(k: int, in_ch: int, out_ch: int, out_h: int, out_w: int) -> int:
    """Exact multiply-accumulate count of one convolution layer."""
    return k * k * in_ch * out_ch * out_h * out_w


def gdn_macs(channels: int, h: int, w: int) -> int:
    """GDN counted as the C^2 per-position matrix product (per-element ops excluded)."""
    return channels * channels * h * w


def count_macs(specs: list[BlockSpec], in_h: int, in_w: int) -> int:
    """Analytic MAC count of a block sequence applied at the given input dims.

    Strided blocks divide (ConvDown/Tcov) or multiply (ConvUp/CRBUp) the
    spatial dims by 2; the count is additive over the sequence and does not
    depend on parameter values.
    """
    total = 0
    h, w = in_h, in_w
    for spec in specs:
        if spec.kind in ("ConvDown", "Tcov") or (spec.kind == "Conv" and spec.stride == 2):
            h, w = h // 2, w // 2
        elif spec.kind in ("ConvUp", "CRBUp"):
            h, w = h * 2, w * 2
        k = spec.kernel
        if spec.kind in ("ConvDown", "ConvUp", "Conv"):
            total += conv_macs(k, spec.in_ch, spec.out_ch, h, w)
            if spec.has_norm:
                total += gdn_macs(spec.out_ch, h, w)
        elif spec.kind == "Tcov":
            total += conv_macs(k, spec.in_ch, spec.out_ch, h, w)
            total += 2 * conv_macs(k, spec.out_ch, spec.out_ch, h, w)
            total += gdn_macs(spec.out_ch, h, w)
        elif spec.kind == "CRBUp":
            total += conv_macs(k, spec.in_ch, spec.out_ch, h, w)
            total += 3 * conv_macs(k, spec.out_ch, spec.out_ch, h, w)
        elif spec.kind == "ResBlock":
            total += 2 * conv_macs(k, spec.in_ch, spec.out_ch, h, w)
    return total
