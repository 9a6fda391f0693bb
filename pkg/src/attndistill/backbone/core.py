from __future__ import annotations

import copy
import logging
import threading
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..attn_features import AttentionTaps, LayerSelector, LayerTap
from ..latent import LatentImage, as_tensor
from .schedule import DiffusionSchedule, add_noise

log = logging.getLogger(__name__)


class BackboneError(RuntimeError):
    """Loading or running a backbone failed."""


class Backbone:
    """A denoiser, its latent codec, noise schedule and attention-tap registry.

    ``unet`` must be callable as ``unet(z, t, context, condition)`` on batched
    latents and expose ``attention_layers``: modules carrying ``layer_id``,
    ``downsample`` and a settable ``tap`` callback. ``codec`` provides
    ``encode``/``decode``/``decoder``/``factor``/``scaling``.

    Forward passes are serialised per instance because taps are per-pass state.
    """

    def __init__(
        self,
        unet: nn.Module,
        codec: nn.Module,
        schedule: DiffusionSchedule,
        text_encoder,
        selector: LayerSelector | None = None,
        name: str = "backbone",
        native_latent_hw: tuple[int, int] | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.unet = unet
        self.codec = codec
        self.schedule = schedule
        self.text_encoder = text_encoder
        self.selector = selector or LayerSelector()
        self.name = name
        self.native_latent_hw = native_latent_hw
        self.forward_calls = 0
        self._lock = threading.RLock()
        self._layers = {layer.layer_id: layer for layer in unet.attention_layers}
        if not self._layers:
            raise BackboneError("backbone declares no self-attention layers")
        self.selected_ids = self.selector.select(self.layer_ids)
        for p in list(unet.parameters()) + list(codec.parameters()):
            p.requires_grad_(False)
        self.to(dtype)

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self._layers)

    @property
    def t_max(self) -> int:
        return self.schedule.t_max

    @property
    def factor(self) -> int:
        return self.codec.factor

    @property
    def accepts_condition(self) -> bool:
        return bool(getattr(self.unet, "accepts_condition", False))

    def to(self, dtype: torch.dtype) -> "Backbone":
        self.dtype = dtype
        self.unet.to(dtype)
        self.codec.to(dtype)
        return self

    def with_selector(self, selector: LayerSelector) -> "Backbone":
        other = copy.copy(self)
        other.selector = selector
        other.selected_ids = selector.select(self.layer_ids)
        return other

    def with_decoder(self, decoder: nn.Module) -> "Backbone":
        """Shallow copy whose codec uses ``decoder``; the original is untouched."""
        other = copy.copy(self)
        other.codec = copy.copy(self.codec)
        other.codec._modules = dict(self.codec._modules)
        other.codec._modules["decoder"] = decoder
        return other

    # codec ---------------------------------------------------------------

    def encode(self, image: torch.Tensor) -> LatentImage:
        """``[3, H, W]`` image in [-1, 1] to a latent."""
        self.codec.check_size(image.shape[-2:])
        with torch.no_grad():
            z = self.codec.encode(image[None].to(self.dtype))[0]
        return LatentImage(z, self.codec.factor, self.codec.scaling)

    def decode(self, latent) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.decode(as_tensor(latent)[None].to(self.dtype))[0]

    def add_noise(self, z0, t: int, noise: torch.Tensor) -> torch.Tensor:
        return add_noise(z0, t, noise, self.schedule)

    # denoiser ------------------------------------------------------------

    def context(self, prompt: str) -> torch.Tensor:
        return self.text_encoder(prompt, dtype=self.dtype)

    def _forward(self, z, t, prompt, condition=None):
        self.schedule.check(t)
        if condition is not None and not self.accepts_condition:
            raise BackboneError(f"backbone {self.name!r} has no structural conditioning hook")
        if condition is not None and condition.ndim == 3:
            condition = condition[None]
        with self._lock:
            self.forward_calls += 1
            return self.unet(as_tensor(z)[None], t, self.context(prompt), condition)[0]

    def denoise(self, z, t: int, prompt: str = "", condition=None) -> torch.Tensor:
        """Raw noise prediction for a single prompt, without guidance mixing."""
        with torch.no_grad():
            return self._forward(z, t, prompt, condition)

    def predict_noise(self, z, t: int, prompt: str = "", cfg_scale: float = 1.0, condition=None):
        """Noise prediction with classifier-free guidance.

        An empty prompt gives the unconditional prediction; ``cfg_scale == 1``
        gives the conditional prediction unmixed.
        """
        if condition is not None and not self.accepts_condition:
            raise BackboneError(f"backbone {self.name!r} has no structural conditioning hook")
        if not prompt:
            return self.denoise(z, t, "", condition)
        if cfg_scale < 1:
            raise ValueError(f"cfg_scale must be >= 1 with a prompt, got {cfg_scale}")
        cond = self.denoise(z, t, prompt, condition)
        if cfg_scale == 1:
            return cond
        uncond = self.denoise(z, t, "", condition)
        return uncond + cfg_scale * (cond - uncond)

    def extract(self, z, t: int, prompt: str = "", grad: bool = False, layer_ids=None) -> AttentionTaps:
        """Run one forward pass and return the selected layers' q/k/v.

        The noise prediction is discarded. With ``grad=False`` the taps are
        detached; with ``grad=True`` they carry the graph back to ``z``.
        """
        ids = list(self.selected_ids if layer_ids is None else layer_ids)
        missing = [i for i in ids if i not in self._layers]
        if missing:
            raise BackboneError(f"no attention taps registered for layers {missing}")
        z = as_tensor(z)
        captured: dict[int, LayerTap] = {}
        hw = z.shape[-2:]

        def tap(module, q, k, v):
            ds = module.downsample
            captured[module.layer_id] = LayerTap(module.layer_id, q[0], k[0], v[0], (hw[0] // ds, hw[1] // ds))

        with self._lock:
            for i in ids:
                self._layers[i].tap = tap
            try:
                with torch.set_grad_enabled(grad):
                    self._forward(z, t, prompt)
            finally:
                for i in ids:
                    self._layers[i].tap = None
        return AttentionTaps([captured[i] for i in sorted(ids)])

    def token_grids(self, latent_hw, layer_ids=None) -> list[tuple[int, int]]:
        """Token grid of each selected layer for a latent of spatial size ``latent_hw``."""
        ids = self.selected_ids if layer_ids is None else layer_ids
        h, w = latent_hw
        return [(h // self._layers[i].downsample, w // self._layers[i].downsample) for i in ids]

    def attention_layer(self, layer_id: int):
        return self._layers[layer_id]


@dataclass
class FinetuneResult:
    decoder: nn.Module
    losses: list[float] = field(default_factory=list)

    @property
    def state_dict(self):
        return self.decoder.state_dict()


def finetune_decoder(backbone: Backbone, image: torch.Tensor, steps: int = 50, lr: float = 1e-4) -> FinetuneResult:
    """Fit a copy of the decoder to one example image with an L1 reconstruction loss.

    The encoder stays frozen and the backbone's own decoder is never modified;
    apply the result with ``backbone.with_decoder(result.decoder)``. The
    returned ``losses`` has ``steps + 1`` entries, the last one measured after
    the final update.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    decoder = copy.deepcopy(backbone.codec.decoder)
    params = [p for p in decoder.parameters()]
    for p in params:
        p.requires_grad_(True)
    x = image[None].to(backbone.dtype)
    with torch.no_grad():
        z = backbone.codec.encode(x)
    opt = torch.optim.Adam(params, lr=lr) if params and steps else None
    losses = []
    for step in range(steps + 1):
        with torch.set_grad_enabled(step < steps and opt is not None):
            loss = (decoder(z) - x).abs().mean()
        value = float(loss.detach())
        if not torch.isfinite(loss):
            raise BackboneError(f"non-finite reconstruction loss at step {step}: {value}")
        losses.append(value)
        if step == steps or opt is None:
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in params:
        p.requires_grad_(False)
    log.debug("decoder fine-tune: L1 %.5f -> %.5f", losses[0], losses[-1])
    return FinetuneResult(decoder, losses)
