"""The codec networks: shared encoder, input-decoder, and multi-scale ref-decoder.

The input- and ref-encoders are one module (same parameter storage); encoder
parameters form the theta_E set frozen during recycled fine-tuning, everything
else is phi.  The ref-decoder extracts reference features at 1/2..1/16
resolution through per-scale analysis chains of Tcov blocks, refines the
deepest one, and fuses them into the residual synthesis net deepest-first,
one concatenation before each upsampling stage.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch
import torch.nn as nn

from .layers import (
    GDN,
    BlockSpec,
    ConvDown,
    ConvUp,
    CRBUp,
    Tcov,
    conv3,
    count_macs,
    orthogonal_init,
    zero_init,
)
from .tensors import ContractError, ImageTensor

CHECKPOINT_VERSION = 1

# lambda grid used for model operating points; index 255 marks a custom value
LAMBDA_TABLE = (0.001, 0.002, 0.003, 0.004, 0.006, 0.008, 0.010, 0.012)


def lambda_to_index(lmbda: float) -> int:
    for i, v in enumerate(LAMBDA_TABLE):
        if abs(v - lmbda) < 1e-12:
            return i
    return 255


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths and ablation switches.

    Defaults are the full-scale operating point (latent 192, hyper 128).
    `toy()` gives a desk-scale config small enough to train on a CPU.
    """

    latent_ch: int = 192
    hyper_ch: int = 128
    num_slices: int = 6
    ref_ch: int = 64
    res_ch: int = 192
    use_ref_entropy: bool = True
    use_ref_decoder: bool = True

    def __post_init__(self):
        if self.latent_ch % self.num_slices != 0:
            raise ContractError("latent channels must split evenly into slices")

    @property
    def slice_ch(self) -> int:
        return self.latent_ch // self.num_slices

    @staticmethod
    def toy(**overrides) -> "ModelConfig":
        base = dict(latent_ch=48, hyper_ch=32, ref_ch=16, res_ch=32)
        base.update(overrides)
        return ModelConfig(**base)


class Encoder(nn.Module):
    """4 stride-2 conv stages, GDN after stages 1-3.  Shared by input and ref paths."""

    def __init__(self, latent_ch: int):
        super().__init__()
        C = latent_ch
        self.stage1 = ConvDown(3, C, has_norm=True)
        self.stage2 = ConvDown(C, C, has_norm=True)
        self.stage3 = ConvDown(C, C, has_norm=True)
        self.stage4 = ConvDown(C, C, has_norm=False)
        self.calls = 0  # forward counter, used by the recycling accounting tests

    def forward(self, x):
        self.calls += 1
        return self.stage4(self.stage3(self.stage2(self.stage1(x))))

    def forward_stages(self, x):
        """Return (shallow stage-1 output, final latent)."""
        self.calls += 1
        s1 = self.stage1(x)
        return s1, self.stage4(self.stage3(self.stage2(s1)))

    def deep_from_shallow(self, s1):
        return self.stage4(self.stage3(self.stage2(s1)))


class InputDecoder(nn.Module):
    """Mirror of the encoder: 4 upsampling stages, IGDN after stages 1-3."""

    def __init__(self, latent_ch: int):
        super().__init__()
        C = latent_ch
        self.stage1 = ConvUp(C, C, has_norm=True)
        self.stage2 = ConvUp(C, C, has_norm=True)
        self.stage3 = ConvUp(C, C, has_norm=True)
        self.stage4 = ConvUp(C, 3, has_norm=False)

    def forward(self, y):
        return self.stage4(self.stage3(self.stage2(self.stage1(y))))


class RefAnalysis(nn.Module):
    """g_a_ref[p]: a chain of (p+1) stride-2 Tcov blocks, output at 1/2^(p+1)."""

    def __init__(self, depth: int, ref_ch: int):
        super().__init__()
        blocks = [Tcov(3, ref_ch)]
        blocks += [Tcov(ref_ch, ref_ch) for _ in range(depth - 1)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class RefSynthesis(nn.Module):
    """g_s_ref: stride-1 refiner applied to the 1/16-scale reference feature."""

    def __init__(self, ref_ch: int):
        super().__init__()
        self.conv1 = conv3(ref_ch, ref_ch)
        self.conv2 = conv3(ref_ch, ref_ch)

    def forward(self, x):
        return self.conv2(torch.relu(self.conv1(x)))


class ResidualSynthesis(nn.Module):
    """g_s_res: four CRB-up stages from 1/16 to full resolution.

    Before each stage the reference feature matching the current resolution is
    concatenated.  The last stage emits 3 channels and its trailing conv is
    zero-initialized so the residual starts at exactly zero.
    """

    def __init__(self, latent_ch: int, ref_ch: int, res_ch: int):
        super().__init__()
        self.stage1 = CRBUp(latent_ch + ref_ch, res_ch)
        self.stage2 = CRBUp(res_ch + ref_ch, res_ch)
        self.stage3 = CRBUp(res_ch + ref_ch, res_ch)
        self.stage4 = CRBUp(res_ch + ref_ch, 3)

    def forward(self, y_hat, ref_feats):
        f16, f8, f4, f2 = ref_feats
        h = self.stage1(torch.cat([y_hat, f16], dim=1))
        h = self.stage2(torch.cat([h, f8], dim=1))
        h = self.stage3(torch.cat([h, f4], dim=1))
        return self.stage4(torch.cat([h, f2], dim=1))


class RefDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.analysis = nn.ModuleList(RefAnalysis(p + 1, cfg.ref_ch) for p in range(4))
        self.synthesis_ref = RefSynthesis(cfg.ref_ch)
        self.synthesis_res = ResidualSynthesis(cfg.latent_ch, cfg.ref_ch, cfg.res_ch)

    def forward(self, y_hat, x_ref):
        f2 = self.analysis[0](x_ref)
        f4 = self.analysis[1](x_ref)
        f8 = self.analysis[2](x_ref)
        f16 = self.synthesis_ref(self.analysis[3](x_ref))
        return self.synthesis_res(y_hat, (f16, f8, f4, f2))


class CodecModel(nn.Module):
    """Full codec: shared encoder, decoders, and the entropy module.

    Immutable after construction/loading by convention; training mutates
    parameters single-threaded.  Concurrent read-only forwards are safe.
    """

    def __init__(self, cfg: ModelConfig, lmbda: float = LAMBDA_TABLE[5]):
        super().__init__()
        from .entropy import EntropyModule  # deferred: entropy imports layers

        self.cfg = cfg
        self.lmbda = float(lmbda)
        self.lambda_index = lambda_to_index(lmbda)
        self.encoder = Encoder(cfg.latent_ch)
        self.input_decoder = InputDecoder(cfg.latent_ch)
        self.ref_decoder = RefDecoder(cfg)
        self.entropy = EntropyModule(cfg)
        self.is_trained = False
        orthogonal_init(self)
        zero_init(self.ref_decoder.synthesis_res.stage4.conv)

    def encoder_parameters(self):
        """theta_E: the shared input/ref encoder parameters."""
        return list(self.encoder.parameters())

    def other_parameters(self):
        """phi: everything except theta_E (entropy module + decoders)."""
        enc_ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in enc_ids]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def _to_batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    return t, False


def image_to_tensor(img: ImageTensor, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.data)).to(dtype)


def encode_features(model: CodecModel, img: ImageTensor | torch.Tensor) -> torch.Tensor:
    """y = E(x).  Input must be padded to multiples of 64."""
    if isinstance(img, ImageTensor):
        if img.padded_h % 64 or img.padded_w % 64:
            raise ContractError("input dims must be multiples of 64")
        x = image_to_tensor(img, dtype=next(model.parameters()).dtype)
    else:
        if img.shape[-2] % 64 or img.shape[-1] % 64:
            raise ContractError("input dims must be multiples of 64")
        x = img
    x, squeeze = _to_batched(x)
    y = model.encoder(x)
    return y.squeeze(0) if squeeze else y


def decode_input(model: CodecModel, y_hat: torch.Tensor) -> torch.Tensor:
    """Reconstruction from the quantized latent alone (unclamped)."""
    y, squeeze = _to_batched(y_hat)
    out = model.input_decoder(y)
    return out.squeeze(0) if squeeze else out


def decode_ref_residual(
    model: CodecModel, y_hat: torch.Tensor, x_ref: torch.Tensor
) -> torch.Tensor:
    """Residual complement synthesized from multi-scale reference features."""
    y, squeeze = _to_batched(y_hat)
    r, _ = _to_batched(x_ref)
    if r.shape[-2] != y.shape[-2] * 16 or r.shape[-1] != y.shape[-1] * 16:
        raise ContractError("reference dims must match the input's padded dims")
    out = model.ref_decoder(y, r)
    return out.squeeze(0) if squeeze else out


def reconstruct(
    model: CodecModel,
    y_hat: torch.Tensor,
    x_ref: torch.Tensor | None,
    clamp: bool = True,
) -> torch.Tensor:
    """x_hat = clamp(decode_input + ref residual, 0, 1); cropping is the caller's job.

    With the ref-decoder ablated (or no reference given) this is exactly the
    clamped input-decoder output.
    """
    out = decode_input(model, y_hat)
    if model.cfg.use_ref_decoder and x_ref is not None:
        out = out + decode_ref_residual(model, y_hat, x_ref)
    return out.clamp(0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# analytic architecture descriptions for MAC accounting


def encoder_description(cfg: ModelConfig) -> list[BlockSpec]:
    C = cfg.latent_ch
    return [
        BlockSpec("ConvDown", 3, C, has_norm=True),
        BlockSpec("ConvDown", C, C, has_norm=True),
        BlockSpec("ConvDown", C, C, has_norm=True),
        BlockSpec("ConvDown", C, C, has_norm=False),
    ]


def input_decoder_description(cfg: ModelConfig) -> list[BlockSpec]:
    C = cfg.latent_ch
    return [
        BlockSpec("ConvUp", C, C, has_norm=True),
        BlockSpec("ConvUp", C, C, has_norm=True),
        BlockSpec("ConvUp", C, C, has_norm=True),
        BlockSpec("ConvUp", C, 3, has_norm=False),
    ]


def ref_decoder_macs(cfg: ModelConfig, h: int, w: int) -> int:
    """MACs of g_a_ref[0..3] + g_s_ref + g_s_res at padded input dims (h, w)."""
    R = cfg.ref_ch
    total = 0
    for p in range(4):
        chain = [BlockSpec("Tcov", 3, R)] + [BlockSpec("Tcov", R, R)] * p
        total += count_macs(chain, h, w)
    # g_s_ref: two stride-1 convs at 1/16 scale
    total += count_macs(
        [BlockSpec("Conv", R, R), BlockSpec("Conv", R, R)], h // 16, w // 16
    )
    W = cfg.res_ch
    C = cfg.latent_ch
    total += count_macs(
        [
            BlockSpec("CRBUp", C + R, W),
            BlockSpec("CRBUp", W + R, W),
            BlockSpec("CRBUp", W + R, W),
            BlockSpec("CRBUp", W + R, 3),
        ],
        h // 16,
        w // 16,
    )
    return total


def encoder_macs(cfg: ModelConfig, h: int, w: int) -> int:
    return count_macs(encoder_description(cfg), h, w)


def input_decoder_macs(cfg: ModelConfig, h: int, w: int) -> int:
    return count_macs(input_decoder_description(cfg), h // 16, w // 16)


# ---------------------------------------------------------------------------
# activation-size instrumentation (used by the block-mode memory checks)


class ActivationMeter:
    """Tracks the largest live activation tensor seen during a pipeline run."""

    def __init__(self):
        self.max_numel = 0

    def note(self, t: torch.Tensor):
        n = int(t.numel())
        if n > self.max_numel:
            self.max_numel = n

    def note_nested(self, model: CodecModel, x: torch.Tensor):
        """Run the encoder noting each stage output."""
        self.note(x)
        h = x.unsqueeze(0) if x.dim() == 3 else x
        for stage in (model.encoder.stage1, model.encoder.stage2, model.encoder.stage3, model.encoder.stage4):
            h = stage(h)
            self.note(h)
        return h


# ---------------------------------------------------------------------------
# checkpoint archive: npz of named arrays + JSON manifest


def save_model(model: CodecModel, path):
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "lambda": model.lmbda,
        "lambda_index": model.lambda_index,
        "is_trained": model.is_trained,
        "config": asdict(model.cfg),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_model(path) -> CodecModel:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(
                f"unsupported checkpoint version {manifest.get('format_version')}"
            )
        cfg = ModelConfig(**manifest["config"])
        model = CodecModel(cfg, lmbda=manifest["lambda"])
        state = {k: torch.from_numpy(z[k]) for k in z.files if k != "__manifest__"}
    if manifest.get("dtype") == "float64":
        model.double()
    model.load_state_dict(state)
    model.lambda_index = manifest["lambda_index"]
    model.is_trained = manifest["is_trained"]
    return model


def with_flags(cfg: ModelConfig, use_ref_entropy: bool, use_ref_decoder: bool) -> ModelConfig:
    return replace(cfg, use_ref_entropy=use_ref_entropy, use_ref_decoder=use_ref_decoder)
