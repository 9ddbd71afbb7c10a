"""8-bit PNG I/O and numpy <-> torch layout conversion for H x W x 3 float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, matching what a saved PNG will hold."""
    return to_uint8(img).astype(np.float32) / 255.0


def to_tensor(img: np.ndarray | list[np.ndarray], device=None, dtype=torch.float32) -> torch.Tensor:
    """HWC image (or list of them) -> NCHW tensor."""
    if isinstance(img, np.ndarray) and img.ndim == 3:
        img = img[None]
    arr = np.ascontiguousarray(np.stack(img) if isinstance(img, list) else img)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(device=device, dtype=dtype).contiguous()


def to_numpy(x: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> N x H x W x 3 float32 array."""
    return x.detach().to("cpu", torch.float32).permute(0, 2, 3, 1).contiguous().numpy()
