"""Image conversions and PNG IO.

Two value ranges are used throughout the project: storage range [0, 1]
(float arrays, PNG files) and model range [-1, 1] (network inputs/outputs).
Conversions happen only through the helpers here.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] storage range -> [-1, 1] model range."""
    return x * 2.0 - 1.0


def to_storage_range(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] model range -> [0, 1] storage range (no clipping)."""
    return (x + 1.0) * 0.5


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWx3 storage-range array -> (3, H, W) tensor, still in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) storage-range tensor -> HxWx3 float64 array, clipped to [0, 1]."""
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) tensor, got shape {tuple(x.shape)}")
    arr = x.detach().cpu().double().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


def save_rgba_png(path: str | Path, rgb: np.ndarray, alpha: np.ndarray) -> None:
    """Write an 8-bit RGBA PNG; alpha carries the binary foreground mask."""
    if rgb.shape[:2] != alpha.shape:
        raise ValueError("rgb and alpha resolutions differ")
    rgba = np.concatenate(
        [
            np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8),
            (np.round(np.clip(alpha, 0.0, 1.0)) * 255).astype(np.uint8)[..., None],
        ],
        axis=2,
    )
    Image.fromarray(rgba, mode="RGBA").save(path)


def load_rgba_png(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an RGBA PNG back into (HxWx3 float64 in [0,1], HxW binary mask)."""
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return rgba[..., :3], (rgba[..., 3] > 0.5).astype(np.float64)
