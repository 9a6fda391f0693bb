from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LatentImage:
    """A ``[channels, height, width]`` latent plus the codec metadata it belongs to.

    ``factor`` is the codec's spatial downsampling factor and ``scaling`` the
    multiplier applied to raw encoder output (0.18215 for SD-1.5 VAEs).
    """

    data: torch.Tensor
    factor: int = 1
    scaling: float = 1.0

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.data.shape[-2] * self.factor, self.data.shape[-1] * self.factor

    def like(self, data: torch.Tensor) -> "LatentImage":
        return LatentImage(data, self.factor, self.scaling)


def as_tensor(z) -> torch.Tensor:
    return z.data if isinstance(z, LatentImage) else z
