"""Image and label-map I/O.

Images are ``[3, H, W]`` float tensors in [-1, 1]; files are 8-bit RGB.
Label maps are integer numpy arrays loaded without any interpolation.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".webp"}
LABEL_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".gif", ".npy"}
SAVE_SUFFIXES = {".png"}


class ImageFormatError(ValueError):
    pass


def _check_suffix(path: Path, allowed, what):
    if path.suffix.lower() not in allowed:
        raise ImageFormatError(f"unsupported {what} format {path.suffix or '(none)'!r} for {path}; "
                               f"use one of {sorted(allowed)}")


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 uint8 pixels, got {pixels.dtype} {pixels.shape}")
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(image) -> np.ndarray:
    if isinstance(image, np.ndarray) and image.dtype == np.uint8:
        return image
    x = torch.as_tensor(image).detach().float().cpu()
    if x.ndim != 3 or x.shape[0] != 3:
        raise ImageFormatError(f"expected a [3, H, W] image tensor, got {tuple(x.shape)}")
    x = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).numpy()


def load_image(path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Load an RGB image as a ``[3, H, W]`` tensor in [-1, 1]; ``size`` is ``(H, W)``."""
    path = Path(path)
    _check_suffix(path, IMAGE_SUFFIXES, "image")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.Resampling.LANCZOS)
        return to_tensor(np.array(im))


def save_image(image, path, seed: int | None = None, metadata: dict | None = None) -> Path:
    """Write a lossless PNG; the run seed and extra metadata go into text chunks."""
    path = Path(path)
    _check_suffix(path, SAVE_SUFFIXES, "output")
    info = PngImagePlugin.PngInfo()
    if seed is not None:
        info.add_text("seed", str(seed))
    for key, value in (metadata or {}).items():
        info.add_text(str(key), str(value))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), "RGB").save(path, pnginfo=info)
    return path


def read_metadata(path) -> dict:
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}))


def load_labels(path) -> np.ndarray:
    """Integer label map; each distinct pixel value (or RGB colour) is one label.

    Paletted and grayscale images keep their stored values; RGB colours are
    numbered in sorted order of their packed ``0xRRGGBB`` value.
    """
    path = Path(path)
    _check_suffix(path, LABEL_SUFFIXES, "label map")
    if path.suffix.lower() == ".npy":
        labels = np.load(path)
        if not np.issubdtype(labels.dtype, np.integer) or labels.ndim != 2:
            raise ImageFormatError(f"{path} must hold a 2-D integer array")
        return labels.astype(np.int64)
    with Image.open(path) as im:
        if im.mode in ("P", "L", "I", "I;16", "1"):
            return np.array(im).astype(np.int64)
        rgb = np.array(im.convert("RGB")).astype(np.int64)
    packed = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    _, labels = np.unique(packed, return_inverse=True)
    return labels.reshape(packed.shape).astype(np.int64)


def save_labels(labels, path) -> Path:
    labels = np.asarray(labels)
    path = Path(path)
    if labels.min() < 0 or labels.max() > 255:
        raise ImageFormatError("only labels in [0, 255] can be stored as an 8-bit image")
    Image.fromarray(labels.astype(np.uint8), "L").save(path)
    return path


def pixel_sha256(image) -> str:
    return hashlib.sha256(np.ascontiguousarray(to_uint8(image)).tobytes()).hexdigest()
