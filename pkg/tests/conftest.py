"""Shared fixtures: tiny models and a synthetic terrain corpus.

The corpus mimics the production data regime: smooth, texture-dominated
scenes drawn from a narrow palette, where every input has a near-duplicate
in the reference set.  That inter-image similarity is what makes the
reference paths genuinely informative in the training-trend tests.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from refcodec.networks import CodecModel, ModelConfig
from refcodec.tensors import ImageTensor, pad_image

TINY = ModelConfig(latent_ch=24, hyper_ch=16, ref_ch=8, res_ch=16)


def smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int = 8) -> np.ndarray:
    """Low-frequency random field in [0,1] via bilinear-upsampled coarse noise."""
    grid = rng.random((coarse, coarse))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.clip(ys.astype(int), 0, coarse - 2)
    x0 = np.clip(xs.astype(int), 0, coarse - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def terrain_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Reddish terrain-like image: shared palette, mild texture."""
    base = smooth_field(rng, h, w)
    texture = 0.15 * smooth_field(rng, h, w, coarse=16)
    lum = 0.25 + 0.5 * base + texture
    r = np.clip(lum * 1.15, 0, 1)
    g = np.clip(lum * 0.75, 0, 1)
    b = np.clip(lum * 0.55, 0, 1)
    return np.stack([r, g, b]).astype(np.float32)


def make_corpus(
    seed: int, n_inputs: int, n_refs: int, h: int, w: int, ref_noise: float = 0.02
):
    """Inputs plus a reference set where refs are perturbed copies of inputs."""
    rng = np.random.default_rng(seed)
    inputs = [pad_image(terrain_image(rng, h, w)) for _ in range(n_inputs)]
    refs = []
    for k in range(n_refs):
        src = inputs[k % n_inputs].cropped()
        noisy = np.clip(src + rng.normal(0, ref_noise, src.shape), 0, 1).astype(np.float32)
        refs.append(pad_image(noisy))
    return inputs, refs


def make_sharp_corpus(
    seed: int, n_inputs: int, n_refs: int, h: int, w: int, ref_noise: float = 0.008
):
    """Texture-heavy variant: fine detail is costly to code blind but shared
    with the near-duplicate references, so the reference paths have real
    signal to exploit."""
    rng = np.random.default_rng(seed)
    inputs = []
    for _ in range(n_inputs):
        base = smooth_field(rng, h, w)
        fine = 0.5 * smooth_field(rng, h, w, coarse=24) + 0.25 * rng.random((h, w))
        lum = np.clip(0.15 + 0.45 * base + 0.4 * fine, 0, 1)
        img = np.stack(
            [np.clip(lum * 1.15, 0, 1), np.clip(lum * 0.75, 0, 1), np.clip(lum * 0.55, 0, 1)]
        ).astype(np.float32)
        inputs.append(pad_image(img))
    refs = []
    for k in range(n_refs):
        src = inputs[k % n_inputs].cropped()
        noisy = np.clip(src + rng.normal(0, ref_noise, src.shape), 0, 1).astype(np.float32)
        refs.append(pad_image(noisy))
    return inputs, refs


def rand_image(rng: np.random.Generator, h: int, w: int) -> ImageTensor:
    return pad_image(rng.random((3, h, w)).astype(np.float32))


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(7)
    model = CodecModel(TINY, lmbda=0.008)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_corpus():
    inputs, refs = make_corpus(seed=11, n_inputs=6, n_refs=4, h=64, w=64)
    return inputs, refs


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
