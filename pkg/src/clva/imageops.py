"""Image array helpers shared across the package.

Images travel through the pipeline as float32 H x W x 3 numpy arrays with
values in [-1, 1] (the decoder's tanh range). Metrics convert to [0, 1]
at their own boundary.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_unit(img: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def from_unit(img: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return img.astype(np.float32) * 2.0 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float -> [0, 255] uint8, round-half-up via rint."""
    return np.rint(to_unit(img) * 255.0).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """[0, 255] uint8 -> [-1, 1] float32."""
    return (raw.astype(np.float32) / 255.0) * 2.0 - 1.0


def nearest_divisible(value: int, divisor: int = 16) -> int:
    """Nearest positive multiple of `divisor` (at least one multiple)."""
    return max(divisor, int(round(value / divisor)) * divisor)


def load_image(path: str | Path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Load a raster image as H x W x 3 in [-1, 1].

    `target_size` is (W, H); bilinear resize when given.
    """
    with Image.open(path) as im:
        return decode_pil(im, target_size)


def decode_bytes(data: bytes, target_size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return decode_pil(im, target_size)


def decode_pil(im: Image.Image, target_size: tuple[int, int] | None = None) -> np.ndarray:
    im = im.convert("RGB")
    if target_size is not None and im.size != tuple(target_size):
        im = im.resize(tuple(target_size), Image.BILINEAR)
    return from_uint8(np.asarray(im))


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return buf.getvalue()


def img_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 -> 1 x 3 x H x W."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def batch_to_tensor(imgs: list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.cat([img_to_tensor(im, dtype) for im in imgs], dim=0)


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W or 3 x H x W -> H x W x 3 float32."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("use tensor_to_imgs for batched tensors")
        t = t[0]
    return t.detach().cpu().numpy().astype(np.float32).transpose(1, 2, 0)


def tensor_to_imgs(t: torch.Tensor) -> list[np.ndarray]:
    return [tensor_to_img(t[i : i + 1]) for i in range(t.shape[0])]


def check_divisible(img: np.ndarray, divisor: int = 16) -> None:
    h, w = img.shape[:2]
    if h % divisor or w % divisor:
        raise ValueError(f"image dims {w}x{h} must be divisible by {divisor}")
