from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


_COLOURS = torch.tensor(
    [[1 / 3**0.5] * 3, [1 / 2**0.5, -1 / 2**0.5, 0.0], [1 / 6**0.5, 1 / 6**0.5, -2 / 6**0.5]], dtype=torch.float64
)


def _dct(n: int) -> torch.Tensor:
    """Orthonormal DCT-II matrix, row ``k`` is frequency ``k``."""
    i = torch.arange(n, dtype=torch.float64)
    m = torch.cos(torch.pi * (i[None] + 0.5) * i[:, None] / n) * (2 / n) ** 0.5
    m[0] /= 2**0.5
    return m


def patch_basis(factor: int) -> torch.Tensor:
    """Orthonormal ``[3*f*f, 3*f*f]`` basis over pixel-unshuffled patches, coarsest first.

    Rows are ordered: the three colour DC terms, then by spatial frequency with
    luminance before chroma.
    """
    d = _dct(factor)
    rows = []
    for fy in range(factor):
        for fx in range(factor):
            for c in range(3):
                key = (0, c) if fy == fx == 0 else (fy + fx + (c > 0), c)
                pattern = torch.einsum("c,y,x->cyx", _COLOURS[c], d[fy], d[fx]).reshape(-1)
                rows.append((key, fy, pattern))
    rows.sort(key=lambda r: (r[0], r[1]))
    return torch.stack([r[2] for r in rows])


class ToyDecoder(nn.Module):
    def __init__(self, projection: torch.Tensor, factor: int):
        super().__init__()
        self.factor = factor
        c = projection.shape[0]
        self.unproject = nn.Conv2d(c, projection.shape[1], 1)
        with torch.no_grad():
            self.unproject.weight.copy_(projection.T[:, :, None, None])
            self.unproject.bias.zero_()
        self.refine = nn.Conv2d(3, 3, 3, padding=1)
        with torch.no_grad():
            self.refine.weight.zero_()
            self.refine.bias.zero_()

    def forward(self, z):
        x = F.pixel_shuffle(self.unproject(z), self.factor)
        return x + self.refine(x)


class ToyCodec(nn.Module):
    """Patch-projection autoencoder.

    The encoder folds ``factor x factor`` pixel patches into channels and
    keeps the ``latent_channels`` lowest-frequency components of an
    orthonormal DCT x (luminance, opponent colour) basis, so a latent pixel is
    roughly a downsampled colour plus its coarsest luminance gradients. The
    decoder starts from the transpose projection followed by a
    zero-initialised refinement conv. With ``identity=True`` (``factor=1``)
    both directions are exact copies.
    """

    def __init__(self, factor: int = 4, latent_channels: int = 4, identity: bool = False):
        super().__init__()
        self.factor = factor
        self.latent_channels = 3 if identity else latent_channels
        self.identity = identity
        self.scaling = 1.0
        if identity:
            if factor != 1:
                raise ValueError("an identity codec must have factor 1")
            self.decoder = nn.Identity()
            self.register_buffer("projection", torch.eye(3))
            return
        dim = 3 * factor * factor
        if latent_channels > dim:
            raise ValueError(f"latent_channels={latent_channels} exceeds patch dimension {dim}")
        projection = patch_basis(factor)[:latent_channels].float()
        self.register_buffer("projection", projection)
        self.decoder = ToyDecoder(projection, factor)

    def check_size(self, hw):
        h, w = hw
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {h}x{w} is not divisible by the codec factor {self.factor}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self.check_size(x.shape[-2:])
        if self.identity:
            return x.clone()
        patches = F.pixel_unshuffle(x, self.factor)
        return torch.einsum("cd,...dhw->...chw", self.projection.to(x.dtype), patches)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if self.identity:
            return z.clone()
        return self.decoder(z)
