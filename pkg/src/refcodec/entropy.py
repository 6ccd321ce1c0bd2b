"""Reference-guided entropy model.

Side information z predicts one set of Gaussian parameters (mu', sigma');
the selected reference latent predicts a second set (mu'', sigma'').  Both
sets condition per-slice parameter nets: the latent is split into 6
channel-contiguous slices coded sequentially, slice k seeing (mu', mu'',
decoded slices < k) for its mean and the sigma counterparts for its scale.
Every sigma is bounded below by SIGMA_MIN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import BlockSpec, conv3, upconv3
from .networks import ModelConfig
from .tensors import ContractError

SIGMA_MIN = 0.11
SCALE_MAX = 256.0
SCALE_LEVELS = 64

# a 16-bit-precision coder cannot charge more than 16 bits for one symbol, so
# likelihoods are floored at one part in 2^16: rate estimates then track what
# the real coder spends even for far-tail symbols
_LIKELIHOOD_FLOOR = 2.0**-16


def scale_grid(dtype=torch.float64) -> torch.Tensor:
    """Geometric grid of 64 coding scales spanning [SIGMA_MIN, SCALE_MAX]."""
    return torch.exp(
        torch.linspace(math.log(SIGMA_MIN), math.log(SCALE_MAX), SCALE_LEVELS, dtype=dtype)
    )


def scale_to_index(sigma: torch.Tensor) -> torch.Tensor:
    """Nearest grid index in log space; nearest (not ceil) keeps the coded
    rate within a fraction of a percent of the model estimate."""
    step = (math.log(SCALE_MAX) - math.log(SIGMA_MIN)) / (SCALE_LEVELS - 1)
    idx = torch.round((torch.log(sigma.double()) - math.log(SIGMA_MIN)) / step)
    return idx.clamp_(0, SCALE_LEVELS - 1).to(torch.int64)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(
    y: torch.Tensor,
    means: torch.Tensor | float = 0.0,
    mode: str = "round",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Quantize a latent.

    round: y_hat = round_half_away_from_zero(y - means) + means
    noise: y_hat = y + u, u ~ Uniform(-0.5, 0.5) i.i.d.
    """
    if mode == "round":
        return round_half_away(y - means) + means
    if mode == "noise":
        u = torch.empty_like(y).uniform_(-0.5, 0.5, generator=generator)
        return y + u
    raise ContractError(f"unknown quantize mode {mode!r}")


def quantize_ste(y: torch.Tensor, means: torch.Tensor | float = 0.0) -> torch.Tensor:
    """Rounded values with a straight-through gradient."""
    return y + (quantize(y, means, "round") - y).detach()


def _standard_cdf(x: torch.Tensor) -> torch.Tensor:
    # 0.5 * erfc(-x / sqrt(2)): stable in the lower tail
    return 0.5 * torch.erfc(-x * (2.0**-0.5))


def gaussian_likelihood(v: torch.Tensor, mu, sigma) -> torch.Tensor:
    """P(v) = Phi((v - mu + 0.5)/sigma) - Phi((v - mu - 0.5)/sigma).

    Evaluated symmetrically around |v - mu| so both CDF arguments sit in the
    stable lower tail.
    """
    d = torch.abs(v - mu)
    upper = _standard_cdf((0.5 - d) / sigma)
    lower = _standard_cdf((-0.5 - d) / sigma)
    return upper - lower


def gaussian_bits(v: torch.Tensor, mu, sigma) -> torch.Tensor:
    """Total code length of a slice under its discretized Gaussian model."""
    like = gaussian_likelihood(v, mu, sigma).clamp(min=_LIKELIHOOD_FLOOR)
    return -torch.log2(like).sum()


class HyperAnalysis(nn.Module):
    """H_z: 3 convs at strides 1, 2, 2 with ReLUs between."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, Ch = cfg.latent_ch, cfg.hyper_ch
        self.conv1 = conv3(C, Ch, stride=1)
        self.conv2 = conv3(Ch, Ch, stride=2)
        self.conv3 = conv3(Ch, Ch, stride=2)

    def forward(self, y):
        h = torch.relu(self.conv1(y))
        h = torch.relu(self.conv2(h))
        return self.conv3(h)


class HyperSynthesis(nn.Module):
    """H'_mu / H'_sigma: 3-layer upsampling net at strides 2, 2, 1."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, Ch = cfg.latent_ch, cfg.hyper_ch
        self.up1 = upconv3(Ch, C)
        self.up2 = upconv3(C, C)
        self.conv = conv3(C, C, stride=1)

    def forward(self, z_hat):
        h = torch.relu(self.up1(z_hat))
        h = torch.relu(self.up2(h))
        return self.conv(h)


class RefEntropyNet(nn.Module):
    """T''_mu / T''_sigma: stride-1 3-layer conv net over the reference latent."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.latent_ch
        self.conv1 = conv3(C, C)
        self.conv2 = conv3(C, C)
        self.conv3 = conv3(C, C)

    def forward(self, y_ref):
        h = torch.relu(self.conv1(y_ref))
        h = torch.relu(self.conv2(h))
        return self.conv3(h)


class SliceNet(nn.Module):
    """Per-slice parameter net: 3 convs tapering to the slice width."""

    def __init__(self, cfg: ModelConfig, k: int):
        super().__init__()
        C, S = cfg.latent_ch, cfg.slice_ch
        in_ch = 2 * C + k * S
        self.conv1 = conv3(in_ch, C)
        self.conv2 = conv3(C, max(C // 2, S))
        self.conv3 = conv3(max(C // 2, S), S)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return self.conv3(h)


def bound_sigma(raw: torch.Tensor) -> torch.Tensor:
    """sigma = SIGMA_MIN + softplus(raw): smooth and >= SIGMA_MIN everywhere."""
    return SIGMA_MIN + F.softplus(raw)


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate density for the hyper-latent.

    A 3-layer monotone network (width 3) parametrizes each channel's CDF:
    matrices pass through softplus (positive), gating factors through tanh
    (magnitude < 1), so the CDF is strictly increasing with limits 0 and 1.
    """

    FILTERS = (1, 3, 3, 1)

    def __init__(self, channels: int, init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        K = len(self.FILTERS) - 1
        scale = init_scale ** (1.0 / K)
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(K):
            fan_in, fan_out = self.FILTERS[k], self.FILTERS[k + 1]
            init = math.log(math.expm1(1.0 / scale / fan_out))
            self.matrices.append(nn.Parameter(torch.full((channels, fan_out, fan_in), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, fan_out, 1).uniform_(-0.5, 0.5)))
            if k < K - 1:
                self.factors.append(nn.Parameter(torch.zeros(channels, fan_out, 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, M) -> pre-sigmoid CDF logits (C, 1, M)."""
        h = x
        K = len(self.matrices)
        for k in range(K):
            h = torch.bmm(F.softplus(self.matrices[k]), h) + self.biases[k]
            if k < K - 1:
                h = h + torch.tanh(self.factors[k]) * torch.tanh(h)
        return h

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._logits(x))

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        """P(v) with v shaped (N, C, H, W); channel c uses its own density."""
        n, c, h, w = v.shape
        flat = v.permute(1, 0, 2, 3).reshape(c, 1, n * h * w)
        upper_l = self._logits(flat + 0.5)
        lower_l = self._logits(flat - 0.5)
        # evaluate the difference on the numerically favourable tail
        sign = -torch.sign(upper_l + lower_l).detach()
        like = torch.abs(torch.sigmoid(sign * upper_l) - torch.sigmoid(sign * lower_l))
        return like.reshape(c, n, h, w).permute(1, 0, 2, 3)

    def pmf_table(self, support_radius: int) -> torch.Tensor:
        """(C, 2R+1) float64 pmf over integer symbols in [-R, R]."""
        R = support_radius
        v = torch.arange(-R, R + 1, dtype=torch.float64)
        grid = v.repeat(self.channels, 1).unsqueeze(1)  # (C, 1, S)
        with torch.no_grad():
            prior64 = self.double_view()
            upper = torch.sigmoid(prior64._logits(grid + 0.5))
            lower = torch.sigmoid(prior64._logits(grid - 0.5))
        return (upper - lower).squeeze(1)

    def double_view(self) -> "FactorizedPrior":
        """Float64 copy used for table construction (encoder/decoder identical)."""
        clone = FactorizedPrior(self.channels)
        clone.load_state_dict(self.state_dict())
        return clone.double()

    def coverage_radius(self, tail_mass: float = 1e-4, max_radius: int = 16000) -> int:
        """Smallest R whose support [-R, R] holds >= 1 - tail_mass in every channel.

        Coding tables built at this radius match the model rate estimate: the
        renormalization that makes integer frequencies sum to 2^16 then only
        redistributes a vanishing amount of mass.
        """
        prior = self.double_view()
        radius = 1
        with torch.no_grad():
            while radius < max_radius:
                edges = torch.tensor([[-radius - 0.5, radius + 0.5]], dtype=torch.float64)
                cdf = prior.cdf(edges.repeat(self.channels, 1).unsqueeze(1))
                mass = (cdf[:, 0, 1] - cdf[:, 0, 0]).min().item()
                if mass >= 1.0 - tail_mass:
                    return radius
                radius *= 2
        return max_radius


def factorized_bits(prior: FactorizedPrior, z_hat: torch.Tensor) -> torch.Tensor:
    squeeze = z_hat.dim() == 3
    if squeeze:
        z_hat = z_hat.unsqueeze(0)
    like = prior.likelihood(z_hat).clamp(min=_LIKELIHOOD_FLOOR)
    return -torch.log2(like).sum()


@dataclass
class EntropyParams:
    """mu'/sigma' from the hyper path, mu''/sigma'' from the reference path."""

    mu_h: torch.Tensor
    sigma_h: torch.Tensor
    mu_r: torch.Tensor
    sigma_r: torch.Tensor


class EntropyModule(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.hyper_analysis = HyperAnalysis(cfg)
        self.hyper_mu = HyperSynthesis(cfg)
        self.hyper_sigma = HyperSynthesis(cfg)
        self.ref_mu = RefEntropyNet(cfg)
        self.ref_sigma = RefEntropyNet(cfg)
        self.slice_mu = nn.ModuleList(SliceNet(cfg, k) for k in range(cfg.num_slices))
        self.slice_sigma = nn.ModuleList(SliceNet(cfg, k) for k in range(cfg.num_slices))
        self.prior = FactorizedPrior(cfg.hyper_ch)

    def hyper_params(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.hyper_mu(z_hat), bound_sigma(self.hyper_sigma(z_hat))

    def ref_params(self, y_ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.ref_mu(y_ref), bound_sigma(self.ref_sigma(y_ref))

    def constant_ref_params(self, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Ablation stand-ins: zero means, unit sigmas."""
        return torch.zeros_like(like), torch.ones_like(like)

    def slice_params(
        self, params: EntropyParams, decoded_slices: list[torch.Tensor], k: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= k < self.cfg.num_slices:
            raise ContractError(f"slice index {k} out of range")
        if len(decoded_slices) != k:
            raise ContractError(
                f"slice {k} conditioning needs {k} decoded slices, got {len(decoded_slices)}"
            )
        mean_in = torch.cat([params.mu_h, params.mu_r, *decoded_slices], dim=1)
        scale_in = torch.cat([params.sigma_h, params.sigma_r, *decoded_slices], dim=1)
        mu_k = self.slice_mu[k](mean_in)
        sigma_k = bound_sigma(self.slice_sigma[k](scale_in))
        return mu_k, sigma_k


def hyper_analyze(model, y: torch.Tensor) -> torch.Tensor:
    squeeze = y.dim() == 3
    z = model.entropy.hyper_analysis(y.unsqueeze(0) if squeeze else y)
    return z.squeeze(0) if squeeze else z


def split_slices(y: torch.Tensor, num_slices: int) -> list[torch.Tensor]:
    return list(torch.chunk(y, num_slices, dim=1))


@dataclass
class RateResult:
    y_hat: torch.Tensor
    bits_y: torch.Tensor
    bits_z: torch.Tensor
    slice_params: list[tuple[torch.Tensor, torch.Tensor]]
    z_hat: torch.Tensor


def full_rate(
    model,
    y: torch.Tensor,
    y_ref: torch.Tensor | None,
    mode: str = "round",
    generator: torch.Generator | None = None,
) -> RateResult:
    """Run the full entropy pipeline over a latent batch.

    mode='round' is the inference path: every quantity a decoder holding
    (z_hat, y_ref) recomputes bit-exactly.  mode='noise' is the smooth rate
    proxy.  mode='train' mixes them: rate terms from additive noise,
    conditioning and the returned latent from straight-through rounding.
    """
    if mode not in ("round", "noise", "train"):
        raise ContractError(f"unknown mode {mode!r}")
    ent: EntropyModule = model.entropy
    cfg = ent.cfg
    squeeze = y.dim() == 3
    if squeeze:
        y = y.unsqueeze(0)
        y_ref = y_ref.unsqueeze(0) if y_ref is not None else None

    z = ent.hyper_analysis(y)
    if mode == "round":
        z_hat = quantize(z, 0.0, "round")
        z_rate_input = z_hat
    elif mode == "noise":
        z_hat = quantize(z, 0.0, "noise", generator)
        z_rate_input = z_hat
    else:
        z_hat = quantize_ste(z)
        z_rate_input = quantize(z, 0.0, "noise", generator)
    bits_z = factorized_bits(ent.prior, z_rate_input)

    mu_h, sigma_h = ent.hyper_params(z_hat)
    if cfg.use_ref_entropy and y_ref is not None:
        mu_r, sigma_r = ent.ref_params(y_ref)
    else:
        mu_r, sigma_r = ent.constant_ref_params(mu_h)
    params = EntropyParams(mu_h, sigma_h, mu_r, sigma_r)

    slices = split_slices(y, cfg.num_slices)
    decoded: list[torch.Tensor] = []
    slice_param_list: list[tuple[torch.Tensor, torch.Tensor]] = []
    bits_y = y.new_zeros(())
    for k, y_k in enumerate(slices):
        mu_k, sigma_k = ent.slice_params(params, decoded, k)
        slice_param_list.append((mu_k, sigma_k))
        if mode == "round":
            y_k_hat = quantize(y_k, mu_k, "round")
            rate_input = y_k_hat
        elif mode == "noise":
            y_k_hat = quantize(y_k, mu_k, "noise", generator)
            rate_input = y_k_hat
        else:
            y_k_hat = quantize_ste(y_k, mu_k)
            rate_input = quantize(y_k, mu_k, "noise", generator)
        bits_y = bits_y + gaussian_bits(rate_input, mu_k, sigma_k)
        decoded.append(y_k_hat)

    y_hat = torch.cat(decoded, dim=1)
    if squeeze:
        y_hat = y_hat.squeeze(0)
        z_hat = z_hat.squeeze(0)
        slice_param_list = [(m.squeeze(0), s.squeeze(0)) for m, s in slice_param_list]
    return RateResult(y_hat, bits_y, bits_z, slice_param_list, z_hat)


# ---------------------------------------------------------------------------
# analytic descriptions for MAC accounting


def hyper_analysis_description(cfg: ModelConfig) -> list[BlockSpec]:
    C, Ch = cfg.latent_ch, cfg.hyper_ch
    return [
        BlockSpec("Conv", C, Ch, stride=1),
        BlockSpec("Conv", Ch, Ch, stride=2),
        BlockSpec("Conv", Ch, Ch, stride=2),
    ]


def hyper_synthesis_description(cfg: ModelConfig) -> list[BlockSpec]:
    C, Ch = cfg.latent_ch, cfg.hyper_ch
    return [
        BlockSpec("ConvUp", Ch, C),
        BlockSpec("ConvUp", C, C),
        BlockSpec("Conv", C, C, stride=1),
    ]


def ref_entropy_description(cfg: ModelConfig) -> list[BlockSpec]:
    C = cfg.latent_ch
    return [BlockSpec("Conv", C, C)] * 3


def slice_net_description(cfg: ModelConfig, k: int) -> list[BlockSpec]:
    C, S = cfg.latent_ch, cfg.slice_ch
    mid = max(C // 2, S)
    return [
        BlockSpec("Conv", 2 * C + k * S, C),
        BlockSpec("Conv", C, mid),
        BlockSpec("Conv", mid, S),
    ]
