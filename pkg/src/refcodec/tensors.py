"""Image containers, padding rules, and lossless 8-bit PNG I/O.

All images travel through the codec as planar float arrays shaped (3, H, W)
with values in [0, 1].  Spatial dims fed to the networks must be multiples
of the total downsampling factor (16 for the latent, 64 once the hyper path
is included), so images are replication-padded on the bottom/right edges and
the true dimensions are kept for the final crop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

PAD_MULTIPLE = 64


class ContractError(ValueError):
    """An operation received data violating its preconditions."""


@dataclass
class ImageTensor:
    """Planar 3-channel image in [0, 1] with padded/true-dimension bookkeeping.

    ``data`` is shaped (3, H_pad, W_pad); ``true_h``/``true_w`` give the
    un-padded pixel dims and ``pad`` the per-edge replication amounts as
    (top, bottom, left, right).
    """

    data: np.ndarray
    true_h: int
    true_w: int
    pad: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ContractError(f"expected (3, H, W) image data, got {self.data.shape}")
        if self.true_h > self.data.shape[1] or self.true_w > self.data.shape[2]:
            raise ContractError("true dims exceed padded dims")

    @property
    def padded_h(self) -> int:
        return self.data.shape[1]

    @property
    def padded_w(self) -> int:
        return self.data.shape[2]

    def validate_range(self):
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ContractError("image values outside [0, 1]")

    def cropped(self) -> np.ndarray:
        """Return the (3, true_h, true_w) view without padding."""
        t, _, l, _ = self.pad
        return self.data[:, t : t + self.true_h, l : l + self.true_w]


def pad_image(data: np.ndarray, multiple: int = PAD_MULTIPLE) -> ImageTensor:
    """Replication-pad a (3, h, w) array so both dims are multiples of `multiple`."""
    if data.ndim != 3 or data.shape[0] != 3:
        raise ContractError(f"expected (3, h, w) array, got {data.shape}")
    _, h, w = data.shape
    pad_b = (-h) % multiple
    pad_r = (-w) % multiple
    padded = np.pad(data, ((0, 0), (0, pad_b), (0, pad_r)), mode="edge")
    return ImageTensor(padded.astype(np.float32), true_h=h, true_w=w, pad=(0, pad_b, 0, pad_r))


def pad_image_to_tiles(data: np.ndarray, tile_w: int, tile_h: int) -> ImageTensor:
    """Pad so the frame partitions exactly into tile_w x tile_h tiles."""
    if tile_w % PAD_MULTIPLE or tile_h % PAD_MULTIPLE:
        raise ContractError("tile dims must be multiples of 64")
    _, h, w = data.shape
    pad_b = (-h) % tile_h
    pad_r = (-w) % tile_w
    padded = np.pad(data, ((0, 0), (0, pad_b), (0, pad_r)), mode="edge")
    return ImageTensor(padded.astype(np.float32), true_h=h, true_w=w, pad=(0, pad_b, 0, pad_r))


def load_png(path) -> ImageTensor:
    """Read a lossless 8-bit RGB raster into [0, 1] (divide by 255) and pad."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return pad_image(arr.transpose(2, 0, 1))


def save_png(img: ImageTensor, path):
    """Write the cropped image as 8-bit RGB PNG."""
    arr = img.cropped()
    arr8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def resize_to(data: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinearly resize a (3, h0, w0) array in [0,1] to (3, h, w)."""
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)).unsqueeze(0)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0).clamp_(0.0, 1.0).numpy()


def match_reference(ref: ImageTensor, target: ImageTensor) -> ImageTensor:
    """Resize a reference image to the target's padded dims.

    References generally share the corpus resolution but the codec accepts
    anything; bilinear resize keeps latent grids aligned with the input's.
    """
    h, w = target.padded_h, target.padded_w
    if (ref.padded_h, ref.padded_w) == (h, w):
        return ref
    resized = resize_to(ref.cropped(), h, w)
    return ImageTensor(resized, true_h=h, true_w=w)
