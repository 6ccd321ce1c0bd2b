"""Reference set, feature cache, and the shallow/deep/recycled selection rules.

Shallow selection ranks candidates by L2 distance between stage-1 pre-encoder
features (texture); deep selection by L1 distance between final pre-encoder
latents (semantics).  After fine-tuning, deep selection is recycled: the
codec's own latent stands in for the deep feature, so the pre-encoder's deep
stages never run at inference.  Ties always resolve to the smallest id.
"""

from __future__ import annotations

import hashlib
import io
import json
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .networks import CodecModel, encode_features
from .tensors import ContractError, ImageTensor, load_png, match_reference


class StaleCacheError(ValueError):
    """Cache was built for different weights or a different reference set."""


@dataclass
class RefEntry:
    id: int
    path: str | None
    dims: tuple[int, int]
    digest: str
    image: ImageTensor | None = None


class ReferenceSet:
    """Fixed, versioned image collection shared verbatim by encoder and decoder."""

    def __init__(self, entries: list[RefEntry]):
        if not entries:
            raise ContractError("reference set is empty")
        self.entries = entries
        h = zlib.crc32(b"")
        for e in sorted(entries, key=lambda e: e.id):
            h = zlib.crc32(f"{e.id}:{e.digest};".encode(), h)
        self.hash = h & 0xFFFFFFFF

    def __len__(self):
        return len(self.entries)

    def load(self, index: int) -> ImageTensor:
        if not 0 <= index < len(self.entries):
            raise ContractError(f"reference id {index} outside the set")
        e = self.entries[index]
        if e.image is not None:
            return e.image
        return load_png(e.path)

    @staticmethod
    def from_dir(path) -> "ReferenceSet":
        from pathlib import Path

        from PIL import Image

        files = sorted(Path(path).glob("*.png"))
        if not files:
            raise ContractError(f"no PNG references under {path}")
        entries = []
        for i, f in enumerate(files):
            digest = hashlib.sha256(f.read_bytes()).hexdigest()
            with Image.open(f) as im:
                dims = (im.height, im.width)
            entries.append(RefEntry(i, str(f), dims, digest))
        return ReferenceSet(entries)

    @staticmethod
    def from_images(images: list[ImageTensor]) -> "ReferenceSet":
        entries = []
        for i, img in enumerate(images):
            digest = hashlib.sha256(img.cropped().tobytes()).hexdigest()
            entries.append(RefEntry(i, None, (img.true_h, img.true_w), digest, image=img))
        return ReferenceSet(entries)


@dataclass(frozen=True)
class Triplet:
    input_id: int
    shallow_id: int
    deep_id: int
    stage: str  # pretrain | recycled


def pre_encode_features(base_model: CodecModel, img: ImageTensor):
    """(shallow stage-1 features, deep final latent) of the pre-encoder."""
    if not base_model.is_trained:
        raise ContractError("pre-encoder requires a trained base model")
    x = torch.from_numpy(np.ascontiguousarray(img.data)).to(
        next(base_model.parameters()).dtype
    )
    with torch.no_grad():
        y_s, y_d = base_model.encoder.forward_stages(x.unsqueeze(0))
    return y_s.squeeze(0), y_d.squeeze(0)


def _l2(a: torch.Tensor, b: torch.Tensor) -> float:
    d = a.detach().numpy().astype(np.float64) - b.detach().numpy().astype(np.float64)
    return float(np.sqrt(np.sum(d * d)))


def _l1(a: torch.Tensor, b: torch.Tensor) -> float:
    d = a.detach().numpy().astype(np.float64) - b.detach().numpy().astype(np.float64)
    return float(np.sum(np.abs(d)))


def _argmin(scores: list[float]) -> int:
    best, best_i = None, -1
    for i, s in enumerate(scores):
        if best is None or s < best:
            best, best_i = s, i
    return best_i


class ReferenceCache:
    """Per-reference precomputed features, keyed by the model pair that made them.

    Entries are memoized per (kind, id, dims) and always reproduce a fresh
    computation bit-exactly; any weight change invalidates the cache through
    the stored hashes.
    """

    def __init__(self, model: CodecModel, refset: ReferenceSet, base_model: CodecModel | None = None):
        self.weight_hash = model.weight_hash()
        self.base_hash = base_model.weight_hash() if base_model is not None else None
        self.lambda_index = model.lambda_index
        self.refset_hash = refset.hash
        self._model = model
        self._base = base_model
        self.refset = refset
        self._store: dict[tuple, torch.Tensor | tuple] = {}

    def check_model(self, model: CodecModel):
        if model.weight_hash() != self.weight_hash:
            raise StaleCacheError("cache weight hash does not match the model")

    def _matched(self, index: int, dims: tuple[int, int]) -> ImageTensor:
        target = ImageTensor(np.zeros((3, dims[0], dims[1]), np.float32), dims[0], dims[1])
        return match_reference(self.refset.load(index), target)

    def latent(self, index: int, dims: tuple[int, int]) -> torch.Tensor:
        key = ("latent", index, dims)
        if key not in self._store:
            with torch.no_grad():
                self._store[key] = encode_features(self._model, self._matched(index, dims))
        return self._store[key]

    def ref_params(self, index: int, dims: tuple[int, int]):
        key = ("params", index, dims)
        if key not in self._store:
            y_ref = self.latent(index, dims)
            with torch.no_grad():
                mu, sigma = self._model.entropy.ref_params(y_ref.unsqueeze(0))
            self._store[key] = (mu.squeeze(0), sigma.squeeze(0))
        return self._store[key]

    def shallow(self, index: int, dims: tuple[int, int]) -> torch.Tensor:
        key = ("shallow", index, dims)
        if key not in self._store:
            self._pre_encode(index, dims)
        return self._store[key]

    def deep(self, index: int, dims: tuple[int, int]) -> torch.Tensor:
        key = ("deep", index, dims)
        if key not in self._store:
            self._pre_encode(index, dims)
        return self._store[key]

    def _pre_encode(self, index: int, dims: tuple[int, int]):
        if self._base is None:
            raise ContractError("cache was built without a pre-encoder model")
        y_s, y_d = pre_encode_features(self._base, self._matched(index, dims))
        self._store[("shallow", index, dims)] = y_s
        self._store[("deep", index, dims)] = y_d


def build_cache(
    model: CodecModel,
    base_model: CodecModel | None,
    refset: ReferenceSet,
    dims: tuple[int, int] | None = None,
) -> ReferenceCache:
    """Precompute every per-reference feature at the given dims."""
    cache = ReferenceCache(model, refset, base_model)
    if dims is None:
        e = refset.entries[0]
        dims = (-(-e.dims[0] // 64) * 64, -(-e.dims[1] // 64) * 64)
    for n in range(len(refset)):
        cache.latent(n, dims)
        cache.ref_params(n, dims)
        if base_model is not None:
            cache.shallow(n, dims)
    return cache


def select_shallow(
    img: ImageTensor, refset: ReferenceSet, cache: ReferenceCache, base_model: CodecModel
) -> int:
    """j = argmin_n || y_s - y_s_ref^n ||_2 over stage-1 pre-encoder features."""
    y_s, _ = pre_encode_features(base_model, img)
    dims = (img.padded_h, img.padded_w)
    scores = [_l2(y_s, cache.shallow(n, dims)) for n in range(len(refset))]
    return _argmin(scores)


def select_deep(
    img: ImageTensor, refset: ReferenceSet, cache: ReferenceCache, base_model: CodecModel
) -> int:
    """i = argmin_n || y_d - y_d_ref^n ||_1 over final pre-encoder latents."""
    _, y_d = pre_encode_features(base_model, img)
    dims = (img.padded_h, img.padded_w)
    scores = [_l1(y_d, cache.deep(n, dims)) for n in range(len(refset))]
    return _argmin(scores)


def select_deep_recycled(y: torch.Tensor, cache: ReferenceCache, model: CodecModel) -> int:
    """q = argmin_n || y - y_ref^n ||_1 over cached codec latents.

    Never touches the pre-encoder: the codec's own latent is the query and the
    cached R-encoder latents are the candidates.
    """
    cache.check_model(model)
    dims = (y.shape[-2] * 16, y.shape[-1] * 16)
    scores = [_l1(y, cache.latent(n, dims)) for n in range(len(cache.refset))]
    return _argmin(scores)


def build_triplets(
    dataset: list[ImageTensor],
    refset: ReferenceSet,
    stage: str,
    model: CodecModel,
    base_model: CodecModel | None,
    cache: ReferenceCache | None = None,
    pretrain_triplets: list[Triplet] | None = None,
) -> list[Triplet]:
    """Input-reference triplets, ordered by input id.

    pretrain: (x, j, i) through the pre-encoder selection rules.
    recycled: j copied from the pretrain triplets, deep id re-selected from the
    codec's own latents.
    """
    if stage not in ("pretrain", "recycled"):
        raise ContractError(f"unknown triplet stage {stage!r}")
    if cache is None:
        cache = build_cache(model, base_model, refset)
    out = []
    if stage == "pretrain":
        for idx, img in enumerate(dataset):
            j = select_shallow(img, refset, cache, base_model)
            i = select_deep(img, refset, cache, base_model)
            out.append(Triplet(idx, j, i, "pretrain"))
        return out
    if pretrain_triplets is None:
        raise ContractError("recycled triplets require the pretrain-stage list")
    fixed_j = {t.input_id: t.shallow_id for t in pretrain_triplets}
    for idx, img in enumerate(dataset):
        with torch.no_grad():
            y = encode_features(model, img)
        q = select_deep_recycled(y, cache, model)
        out.append(Triplet(idx, fixed_j[idx], q, "recycled"))
    return out


def selection_accuracy(clean: list[int], perturbed: list[int]) -> float:
    """Percentage of perturbed choices that match the clean baseline."""
    if len(clean) != len(perturbed):
        raise ContractError("choice lists must have equal length")
    if not clean:
        raise ContractError("empty choice lists")
    matches = sum(1 for a, b in zip(clean, perturbed) if a == b)
    return 100.0 * matches / len(clean)


# ---------------------------------------------------------------------------
# cache archive


def save_cache(cache: ReferenceCache, path):
    manifest = {
        "weight_hash": cache.weight_hash,
        "base_hash": cache.base_hash,
        "lambda_index": cache.lambda_index,
        "refset_hash": cache.refset_hash,
        "version": 1,
    }
    arrays = {}
    for (kind, idx, dims), value in cache._store.items():
        tag = f"{kind}/{idx}/{dims[0]}x{dims[1]}"
        if kind == "params":
            arrays[tag + "/mu"] = value[0].numpy()
            arrays[tag + "/sigma"] = value[1].numpy()
        else:
            arrays[tag] = value.numpy()
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.frombuffer(json.dumps(manifest).encode(), np.uint8), **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_cache(path, model: CodecModel, refset: ReferenceSet, base_model=None) -> ReferenceCache:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        cache = ReferenceCache(model, refset, base_model)
        if manifest["weight_hash"] != cache.weight_hash:
            raise StaleCacheError("cache archive was built for different model weights")
        if manifest["refset_hash"] != cache.refset_hash:
            raise StaleCacheError("cache archive was built for a different reference set")
        if manifest["lambda_index"] != cache.lambda_index:
            raise StaleCacheError("cache archive was built for a different lambda index")
        params: dict[tuple, dict] = {}
        for tag in z.files:
            if tag == "__manifest__":
                continue
            parts = tag.split("/")
            kind, idx = parts[0], int(parts[1])
            h, w = parts[2].split("x")
            key = (kind, idx, (int(h), int(w)))
            if kind == "params":
                params.setdefault(key, {})[parts[3]] = torch.from_numpy(z[tag])
            else:
                cache._store[key] = torch.from_numpy(z[tag])
        for key, d in params.items():
            cache._store[key] = (d["mu"], d["sigma"])
    return cache
