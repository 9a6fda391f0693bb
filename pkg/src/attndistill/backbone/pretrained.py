"""Adapter for diffusers-format latent-diffusion checkpoints (SD-1.x / 2.x layout).

Requires the optional ``diffusers`` dependency. Self-attention (``attn1``)
layers are numbered in forward order: down blocks, mid block, up blocks.
"""
from __future__ import annotations

import json
import re

import torch
import torch.nn as nn

from ..attn_features import LayerSelector, attention
from .core import Backbone, BackboneError
from .loader import _DTYPES, resolve_checkpoint
from .schedule import DiffusionSchedule

_NAME = re.compile(r"^(down_blocks|mid_block|up_blocks)\.?(\d*)\.attentions\.(\d+)\.transformer_blocks\.(\d+)\.attn1")
_STAGE = {"down_blocks": 0, "mid_block": 1, "up_blocks": 2}


class TapAttnProcessor:
    """Self-attention processor exposing per-head q/k/v to a ``tap`` callback."""

    def __init__(self, layer_id: int, downsample: int, name: str):
        self.layer_id = layer_id
        self.downsample = downsample
        self.name = name
        self.tap = None

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        batch, n, _ = hidden_states.shape
        q, k, v = attn.to_q(hidden_states), attn.to_k(hidden_states), attn.to_v(hidden_states)
        head_dim = q.shape[-1] // attn.heads
        q, k, v = (x.view(batch, -1, attn.heads, head_dim).transpose(1, 2) for x in (q, k, v))
        if self.tap is not None:
            self.tap(self, q, k, v)
            out = attention(q, k, v)
        else:
            out = nn.functional.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(batch, -1, attn.heads * head_dim).to(q.dtype)
        out = attn.to_out[1](attn.to_out[0](out))
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class DiffusersUNetAdapter(nn.Module):
    """Wraps a ``UNet2DConditionModel`` (and optional ControlNet) behind the toy interface.

    Timestep ``t`` in ``[1, t_max]`` maps to the diffusers index ``t - 1``;
    ``t = 0`` (clean latent) maps to index 0.
    """

    def __init__(self, unet, controlnet=None):
        super().__init__()
        self.unet = unet
        self.controlnet = controlnet
        n_down = len(unet.down_blocks)
        n_up = len(unet.up_blocks)
        found = []
        for name in unet.attn_processors:
            m = _NAME.match(name)
            if not m:
                continue
            stage, block = m.group(1), int(m.group(2) or 0)
            if stage == "down_blocks":
                ds = 2**block
            elif stage == "mid_block":
                ds = 2 ** (n_down - 1)
            else:
                ds = 2 ** (n_up - 1 - block)
            found.append(((_STAGE[stage], block, int(m.group(3)), int(m.group(4))), name, ds))
        found.sort()
        processors = dict(unet.attn_processors)
        self.attention_layers = []
        for layer_id, (_, name, ds) in enumerate(found):
            proc = TapAttnProcessor(layer_id, ds, name)
            processors[name] = proc
            self.attention_layers.append(proc)
        unet.set_attn_processor(processors)

    @property
    def accepts_condition(self) -> bool:
        return self.controlnet is not None

    def forward(self, z, t, context, condition=None):
        index = torch.tensor([max(int(t) - 1, 0)], device=z.device)
        context = context.to(z.dtype).expand(z.shape[0], *context.shape[1:])
        extra = {}
        if condition is not None:
            if self.controlnet is None:
                raise ValueError("no ControlNet loaded for structural conditioning")
            down, mid = self.controlnet(
                z, index, encoder_hidden_states=context, controlnet_cond=condition.to(z.dtype), return_dict=False
            )
            extra = {"down_block_additional_residuals": down, "mid_block_additional_residual": mid}
        return self.unet(z, index, encoder_hidden_states=context, **extra).sample


class VAEDecoder(nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.post_quant_conv = vae.post_quant_conv
        self.decoder = vae.decoder
        self.scaling = vae.config.scaling_factor

    def forward(self, z):
        z = z / self.scaling
        if self.post_quant_conv is not None:
            z = self.post_quant_conv(z)
        return self.decoder(z)


class VAECodec(nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.encoder = vae.encoder
        self.quant_conv = vae.quant_conv
        self.decoder = VAEDecoder(vae)
        self.factor = 2 ** (len(vae.config.block_out_channels) - 1)
        self.scaling = vae.config.scaling_factor

    def check_size(self, hw):
        h, w = hw
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {h}x{w} is not divisible by the codec factor {self.factor}")

    def encode(self, x):
        self.check_size(x.shape[-2:])
        moments = self.encoder(x)
        if self.quant_conv is not None:
            moments = self.quant_conv(moments)
        mean, _ = moments.chunk(2, dim=1)
        return mean * self.scaling

    def decode(self, z):
        return self.decoder(z)


class ClipPromptEncoder:
    def __init__(self, tokenizer, text_encoder):
        self.tokenizer = tokenizer
        self.text_encoder = text_encoder
        self._cache = {}

    def __call__(self, prompt: str, dtype=torch.float32):
        if prompt not in self._cache:
            ids = self.tokenizer(
                prompt, padding="max_length", max_length=self.tokenizer.model_max_length, truncation=True,
                return_tensors="pt",
            ).input_ids
            with torch.no_grad():
                self._cache[prompt] = self.text_encoder(ids)[0]
        return self._cache[prompt].to(dtype)


class NullPromptEncoder:
    """Zero context for checkpoints shipped without a text encoder; prompts are rejected."""

    def __init__(self, tokens: int, dim: int):
        self.shape = (1, tokens, dim)

    def __call__(self, prompt: str, dtype=torch.float32):
        if prompt:
            raise BackboneError("this backbone was loaded without a text encoder")
        return torch.zeros(self.shape, dtype=dtype)


def schedule_from_config(config: dict) -> DiffusionSchedule:
    kind = config.get("beta_schedule", "scaled_linear")
    t_max = int(config.get("num_train_timesteps", 1000))
    start, end = float(config.get("beta_start", 0.00085)), float(config.get("beta_end", 0.012))
    if kind == "scaled_linear":
        return DiffusionSchedule.scaled_linear(t_max, start, end)
    if kind == "linear":
        betas = torch.linspace(start, end, t_max, dtype=torch.float64)
        acp = torch.cumprod(1 - betas, 0)
        return DiffusionSchedule(torch.cat([torch.ones(1, dtype=torch.float64), acp]))
    raise BackboneError(f"unsupported beta schedule {kind!r}")


def from_components(unet, vae, prompt_encoder, schedule, controlnet=None, selector=None, name="pretrained",
                    dtype=torch.float32) -> Backbone:
    adapter = DiffusersUNetAdapter(unet, controlnet)
    codec = VAECodec(vae)
    native = unet.config.sample_size
    native = (native, native) if isinstance(native, int) else tuple(native)
    return Backbone(adapter, codec, schedule, prompt_encoder, selector=selector, name=name,
                    native_latent_hw=native, dtype=dtype)


def load_pretrained(desc: dict) -> Backbone:
    try:
        import diffusers
    except ImportError as exc:
        raise BackboneError("pretrained backbones need the optional 'diffusers' package") from exc
    path = resolve_checkpoint(desc)
    if (path / "text_encoder_2").exists():
        raise BackboneError("dual-text-encoder (SDXL) checkpoints are not supported by this adapter")
    try:
        unet = diffusers.UNet2DConditionModel.from_pretrained(path, subfolder="unet")
        vae = diffusers.AutoencoderKL.from_pretrained(path, subfolder="vae")
        sched = json.loads((path / "scheduler" / "scheduler_config.json").read_text())
    except (OSError, ValueError) as exc:
        raise BackboneError(f"cannot load checkpoint {path}: {exc}") from exc
    controlnet = None
    if desc.get("controlnet"):
        controlnet = diffusers.ControlNetModel.from_pretrained(
            resolve_checkpoint({"checkpoint": desc["controlnet"], "sha256": desc.get("controlnet_sha256"),
                                **({"_source": desc["_source"]} if "_source" in desc else {})})
        )
    if desc.get("text_encoder", True) and (path / "text_encoder").exists():
        import transformers

        prompt_encoder = ClipPromptEncoder(
            transformers.CLIPTokenizer.from_pretrained(path, subfolder="tokenizer"),
            transformers.CLIPTextModel.from_pretrained(path, subfolder="text_encoder"),
        )
    else:
        prompt_encoder = NullPromptEncoder(77, unet.config.cross_attention_dim)
    return from_components(
        unet, vae, prompt_encoder, schedule_from_config(sched), controlnet,
        selector=LayerSelector.parse(desc.get("layer_selector")),
        name=str(path.name), dtype=_DTYPES[desc.get("dtype", "float32")],
    )
