"""Two-stage optimization: base model, reference-guided pre-training, and
recycled fine-tuning with frozen encoders.

The rate term trains on the additive-noise proxy, the distortion path on
straight-through rounding; distortion is scaled to 8-bit units (255^2 * MSE)
so the published lambda grid lands at sensible bpp operating points.
Determinism contract: fixed seed + single-threaded mode reproduce loss logs
and final weights bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import entropy as ent
from .networks import CodecModel, ModelConfig, encode_features, reconstruct
from .selector import (
    ReferenceCache,
    ReferenceSet,
    Triplet,
    build_cache,
    build_triplets,
)
from .tensors import ContractError, ImageTensor


@dataclass
class TrainConfig:
    lmbda: float = 0.008
    lr: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    patch: int = 128
    seed: int = 0
    use_ref_entropy: bool = True
    use_ref_decoder: bool = True
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-4
    lr_floor: float = 1e-6
    eval_every: int = 100
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig.toy)

    def __post_init__(self):
        if self.lmbda <= 0:
            raise ContractError("lambda must be positive")
        if self.patch % 64:
            raise ContractError("patch size must be divisible by 64")


def _boolean(v: str) -> bool:
    return v.lower() in ("1", "true", "yes")


CONFIG_KEYS = {
    "lmbda": float,
    "lr": float,
    "steps": int,
    "batch_size": int,
    "patch": int,
    "seed": int,
    "use_ref_entropy": _boolean,
    "use_ref_decoder": _boolean,
    "plateau_factor": float,
    "plateau_patience": int,
    "plateau_min_delta": float,
    "lr_floor": float,
    "eval_every": int,
    "deterministic": _boolean,
}

MODEL_KEYS = {"latent_ch": int, "hyper_ch": int, "ref_ch": int, "res_ch": int}


class ConfigError(ValueError):
    pass


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Flat key=value config; unknown keys are rejected."""
    values: dict[str, object] = {}
    model_values: dict[str, int] = {}
    lines = [ln.strip() for ln in text.splitlines()]
    pairs = [ln for ln in lines if ln and not ln.startswith("#")]
    for item in pairs + [f"{k}={v}" for k, v in (overrides or {}).items()]:
        if "=" not in item:
            raise ConfigError(f"malformed config line {item!r}")
        key, _, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        try:
            if key in CONFIG_KEYS:
                values[key] = CONFIG_KEYS[key](raw)
            elif key in MODEL_KEYS:
                model_values[key] = MODEL_KEYS[key](raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    if model_values:
        values["model"] = ModelConfig.toy(**model_values)
    try:
        return TrainConfig(**values)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def rd_loss(x, x_hat, bits_y, bits_z, lmbda: float, pixel_count: int):
    """L = (bits_y + bits_z) / pixels + lambda * 255^2 * MSE."""
    mse = torch.mean((x - x_hat) ** 2)
    return (bits_y + bits_z) / pixel_count + lmbda * (255.0**2) * mse


class PlateauScheduler:
    """Halve the lr once the monitored loss fails to improve by min_delta for
    `patience` consecutive evaluations; never below the floor."""

    def __init__(self, optimizer, factor=0.5, patience=10, min_delta=1e-4, floor=1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.floor = floor
        self.best = float("inf")
        self.bad_evals = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, value: float):
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_evals = 0
            return
        self.bad_evals += 1
        if self.bad_evals >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] = max(self.floor, g["lr"] * self.factor)
            self.bad_evals = 0


@dataclass
class TrainState:
    step: int = 0
    best_val: float = float("inf")
    lr_history: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    def record(self, step, loss, bpp_y, bpp_z, mse, lr):
        self.step = step
        self.log.append(
            {"step": step, "loss": loss, "bpp_y": bpp_y, "bpp_z": bpp_z, "mse": mse, "lr": lr}
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "bpp_y", "bpp_z", "mse", "lr"])
            w.writeheader()
            w.writerows(self.log)


def _setup_determinism(config: TrainConfig):
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)


def _stack_images(images: list[ImageTensor], dtype) -> torch.Tensor:
    return torch.stack([torch.from_numpy(np.ascontiguousarray(im.data)) for im in images]).to(dtype)


def _ref_for(triplets, ids):
    by_input = {t.input_id: t for t in triplets}
    return [by_input[i] for i in ids]


def training_forward(model, x, x_ref_i, x_ref_j, lmbda, generator=None, mode="train"):
    """One rate-distortion forward pass over a batch; returns loss pieces."""
    y = encode_features(model, x)
    y_ref = None
    if model.cfg.use_ref_entropy and x_ref_i is not None:
        y_ref = encode_features(model, x_ref_i)
    rate = ent.full_rate(model, y, y_ref, mode=mode, generator=generator)
    x_hat = reconstruct(
        model,
        rate.y_hat,
        x_ref_j if model.cfg.use_ref_decoder else None,
        clamp=(mode == "round"),
    )
    pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    loss = rd_loss(x, x_hat, rate.bits_y, rate.bits_z, lmbda, pixels)
    mse = float(torch.mean((x - x_hat) ** 2).item())
    return loss, float(rate.bits_y.item()) / pixels, float(rate.bits_z.item()) / pixels, mse


def evaluate(model, dataset, refset, triplets, lmbda) -> float:
    """Mean round-mode RD loss over a validation triplet list."""
    dtype = next(model.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for t in triplets:
            x = _stack_images([dataset[t.input_id]], dtype)
            x_ref_i = _stack_images([_matched_ref(refset, t.deep_id, dataset[t.input_id])], dtype)
            x_ref_j = _stack_images([_matched_ref(refset, t.shallow_id, dataset[t.input_id])], dtype)
            loss, *_ = training_forward(model, x, x_ref_i, x_ref_j, lmbda, mode="round")
            total += float(loss.item())
    return total / len(triplets)


def _matched_ref(refset, index, target: ImageTensor) -> ImageTensor:
    from .tensors import match_reference

    return match_reference(refset.load(index), target)


def _train_loop(
    model: CodecModel,
    params,
    config: TrainConfig,
    dataset: list[ImageTensor],
    refset: ReferenceSet | None,
    triplets: list[Triplet] | None,
    val_triplets: list[Triplet] | None = None,
) -> TrainState:
    _setup_determinism(config)
    state = TrainState()
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = PlateauScheduler(
        opt,
        factor=config.plateau_factor,
        patience=config.plateau_patience,
        min_delta=config.plateau_min_delta,
        floor=config.lr_floor,
    )
    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    dtype = next(model.parameters()).dtype

    if config.steps == 0:
        state.record(0, float("nan"), 0.0, 0.0, 0.0, sched.lr)
        return state

    n = len(dataset)
    for step in range(1, config.steps + 1):
        ids = rng.integers(0, n, size=min(config.batch_size, n))
        x = _stack_images([dataset[i] for i in ids], dtype)
        x_ref_i = x_ref_j = None
        if triplets is not None:
            chosen = _ref_for(triplets, ids.tolist())
            x_ref_i = _stack_images(
                [_matched_ref(refset, t.deep_id, dataset[t.input_id]) for t in chosen], dtype
            )
            x_ref_j = _stack_images(
                [_matched_ref(refset, t.shallow_id, dataset[t.input_id]) for t in chosen], dtype
            )
        loss, bpp_y, bpp_z, mse = training_forward(
            model, x, x_ref_i, x_ref_j, config.lmbda, generator=noise_gen
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.record(step, float(loss.item()), bpp_y, bpp_z, mse, sched.lr)
        state.lr_history.append(sched.lr)

        if val_triplets is not None and step % config.eval_every == 0:
            val = evaluate(model, dataset, refset, val_triplets, config.lmbda)
            state.best_val = min(state.best_val, val)
            sched.step(val)
        elif val_triplets is None and step % config.eval_every == 0:
            # no held-out set: schedule on the recent training loss
            recent = [r["loss"] for r in state.log[-config.eval_every :]]
            sched.step(float(np.mean(recent)))
    return state


def train_base(config: TrainConfig, dataset: list[ImageTensor]) -> tuple[CodecModel, TrainState]:
    """Train the reference-free base model whose encoder becomes the pre-encoder."""
    if not dataset:
        raise ContractError("empty training dataset")
    _setup_determinism(config)
    cfg = replace(config.model, use_ref_entropy=False, use_ref_decoder=False)
    model = CodecModel(cfg, lmbda=config.lmbda)
    state = _train_loop(model, list(model.parameters()), config, dataset, None, None)
    model.is_trained = config.steps > 0
    return model, state


def pretrain_codec(
    config: TrainConfig,
    triplets: list[Triplet],
    base_model: CodecModel,
    dataset: list[ImageTensor],
    refset: ReferenceSet,
    val_triplets: list[Triplet] | None = None,
    model: CodecModel | None = None,
) -> tuple[CodecModel, TrainState]:
    """Jointly optimize theta_E and phi on the pre-training triplets."""
    _setup_determinism(config)
    if model is None:
        cfg = replace(
            config.model,
            use_ref_entropy=config.use_ref_entropy,
            use_ref_decoder=config.use_ref_decoder,
        )
        model = CodecModel(cfg, lmbda=config.lmbda)
    use_refs = model.cfg.use_ref_entropy or model.cfg.use_ref_decoder
    state = _train_loop(
        model,
        list(model.parameters()),
        config,
        dataset,
        refset if use_refs else None,
        triplets if use_refs else None,
        val_triplets,
    )
    model.is_trained = config.steps > 0
    return model, state


def finetune_recycled(
    model: CodecModel,
    config: TrainConfig,
    dataset: list[ImageTensor],
    refset: ReferenceSet,
    pretrain_triplets: list[Triplet],
    cache: ReferenceCache | None = None,
) -> tuple[CodecModel, TrainState, list[Triplet]]:
    """Freeze theta_E, rebuild triplets through recycled deep selection, tune phi."""
    _setup_determinism(config)
    if cache is None:
        cache = build_cache(model, None, refset, dims=None)
    triplets = build_triplets(
        dataset, refset, "recycled", model, None, cache=cache, pretrain_triplets=pretrain_triplets
    )
    for p in model.encoder_parameters():
        p.requires_grad_(False)
    try:
        state = _train_loop(
            model, model.other_parameters(), config, dataset, refset, triplets, None
        )
    finally:
        for p in model.encoder_parameters():
            p.requires_grad_(True)
    return model, state, triplets


def lambda_sweep(
    configs: list[TrainConfig],
    dataset: list[ImageTensor],
    refset: ReferenceSet,
    base_model: CodecModel,
    triplets: list[Triplet],
) -> list[tuple[float, CodecModel]]:
    """Independently trained model per lambda, returned in ascending order."""
    if len(configs) < 2:
        raise ContractError("a sweep needs at least two lambda values")
    out = []
    for cfg in sorted(configs, key=lambda c: c.lmbda):
        model, _ = pretrain_codec(cfg, triplets, base_model, dataset, refset)
        out.append((cfg.lmbda, model))
    return out
