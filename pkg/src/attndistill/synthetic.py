"""Procedural test images: small, deterministic stand-ins for real examples."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _grid(h, w):
    return torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")


def stripes(h: int = 64, w: int = 64, period: float = 6.0, angle: float = 0.6) -> torch.Tensor:
    yy, xx = _grid(h, w)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    img = torch.stack([torch.sin(u * 2 * np.pi / period), torch.cos(u * np.pi / period), torch.sin(yy / 3.0)])
    return (0.8 * img).float()


def checker(h: int = 64, w: int = 64, cell: int = 8) -> torch.Tensor:
    yy, xx = _grid(h, w)
    c = ((xx // cell + yy // cell) % 2) * 1.4 - 0.7
    return torch.stack([c, -c * 0.5, torch.full_like(c, 0.2)]).float()


def blobs(h: int = 64, w: int = 64, seed: int = 0, smooth: int = 5) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64)
    x = F.avg_pool2d(x, smooth, 1, smooth // 2, count_include_pad=False)[0]
    x = (x - x.mean()) / x.std()
    return (0.6 * x).clamp(-1, 1).float()


def scene(h: int = 64, w: int = 64) -> torch.Tensor:
    """A smooth "content" image: gradients plus a disc."""
    yy, xx = _grid(h, w)
    disc = ((xx - w / 2) ** 2 + (yy - h / 2) ** 2 < (0.3 * min(h, w)) ** 2).double()
    img = torch.stack([xx / w * 2 - 1, yy / h * 2 - 1, disc * 1.6 - 0.8])
    return (0.9 * img).float()


def two_region_labels(h: int = 64, w: int = 64, vertical: bool = True) -> np.ndarray:
    labels = np.zeros((h, w), dtype=np.int64)
    if vertical:
        labels[:, w // 2 :] = 1
    else:
        labels[h // 2 :, :] = 1
    return labels


def two_texture_image(h: int = 64, w: int = 64) -> tuple[torch.Tensor, np.ndarray]:
    """Stripes on the left half, checker on the right half, with matching labels."""
    labels = two_region_labels(h, w)
    img = torch.where(torch.from_numpy(labels == 1)[None], checker(h, w), stripes(h, w))
    return img, labels
