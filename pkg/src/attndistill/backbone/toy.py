"""A small, seeded, untrained denoiser with genuine self-attention layers.

Used for desk-scale verification: gradients, determinism and timestep
sensitivity all behave like a real UNet, only smaller.
"""
from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attn_features import attention


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(channels):
    return 8 if channels % 8 == 0 else 1


class SelfAttention(nn.Module):
    """Residual multi-head self-attention over spatial tokens.

    ``tap`` is an optional callback ``tap(module, q, k, v)`` invoked with
    ``[batch, heads, tokens, dim]`` tensors before aggregation.
    """

    def __init__(self, channels: int, heads: int, layer_id: int, downsample: int, qk_gain: float = 0.3):
        super().__init__()
        self.heads = heads
        self.layer_id = layer_id
        self.downsample = downsample
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        # logits std scales with qk_gain**2; small gains keep attention soft and the AD loss well conditioned
        nn.init.normal_(self.to_q.weight, std=qk_gain / channels**0.5)
        nn.init.normal_(self.to_k.weight, std=qk_gain / channels**0.5)
        self.tap = None
        self.residual_scale = 1.0

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self._split(self.to_q(tokens)), self._split(self.to_k(tokens)), self._split(self.to_v(tokens))
        if self.tap is not None:
            self.tap(self, q, k, v)
        out = attention(q, k, v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + self.residual_scale * out


class ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ToyUNet(nn.Module):
    """Three-stage residual denoiser: full resolution, half resolution, full resolution.

    Layer ids run in forward order. With the default ``layers=(4, 8, 4)`` there
    are 16 self-attention layers and the last six mix both resolutions.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        channels: int = 32,
        heads: int = 2,
        layers: tuple[int, int, int] = (4, 8, 4),
        context_dim: int = 32,
        condition_channels: int = 0,
        qk_gain: float = 0.3,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.channels = channels
        self.context_dim = context_dim
        self.condition_channels = condition_channels
        emb_dim = channels * 2
        self.time_mlp = nn.Sequential(nn.Linear(channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.context_proj = nn.Linear(context_dim, emb_dim)
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)
        self.cond_in = nn.Conv2d(condition_channels, channels, 3, padding=1) if condition_channels else None

        ids = iter(range(sum(layers)))

        def stage(n, downsample):
            res = nn.ModuleList(ResBlock(channels, emb_dim) for _ in range(n))
            att = nn.ModuleList(SelfAttention(channels, heads, next(ids), downsample, qk_gain) for _ in range(n))
            return res, att

        self.res_a, self.att_a = stage(layers[0], 1)
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.res_b, self.att_b = stage(layers[1], 2)
        self.up = nn.Conv2d(channels, channels, 3, padding=1)
        self.res_c, self.att_c = stage(layers[2], 1)
        self.norm_out = nn.GroupNorm(_groups(channels), channels)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)

    @property
    def attention_layers(self) -> list[SelfAttention]:
        return [*self.att_a, *self.att_b, *self.att_c]

    @property
    def accepts_condition(self) -> bool:
        return self.cond_in is not None

    def forward(self, z, t, context, condition=None):
        if z.shape[-1] % 2 or z.shape[-2] % 2:
            raise ValueError(f"toy denoiser needs even latent sides, got {tuple(z.shape[-2:])}")
        emb = timestep_embedding(t, self.channels).to(z.dtype).expand(z.shape[0], -1)
        emb = self.time_mlp(emb) + self.context_proj(context.to(z.dtype))
        h = self.conv_in(z)
        if condition is not None:
            if self.cond_in is None:
                raise ValueError("this denoiser has no structural conditioning hook")
            cond = F.interpolate(condition.to(z.dtype), size=z.shape[-2:], mode="bilinear", align_corners=False)
            h = h + self.cond_in(cond)
        for res, att in zip(self.res_a, self.att_a):
            h = att(res(h, emb))
        skip = h
        h = self.down(h)
        for res, att in zip(self.res_b, self.att_b):
            h = att(res(h, emb))
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest")) + skip
        for res, att in zip(self.res_c, self.att_c):
            h = att(res(h, emb))
        return self.conv_out(F.silu(self.norm_out(h)))


class ToyTextEncoder:
    """Deterministic prompt embedding: a hash-seeded Gaussian vector; empty prompt maps to zeros."""

    def __init__(self, dim: int = 32):
        self.dim = dim

    def __call__(self, prompt: str, dtype=torch.float32):
        if not prompt:
            return torch.zeros(1, self.dim, dtype=dtype)
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "little")
        g = torch.Generator().manual_seed(seed)
        return torch.randn(1, self.dim, generator=g, dtype=torch.float64).to(dtype)
