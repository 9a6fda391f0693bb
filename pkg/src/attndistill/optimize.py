"""Latent optimization against attention-distillation and content losses.

The denoiser is only used as a feature extractor here: its noise prediction
is never applied, and the latent is the only thing that changes.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .attn_features import (
    UnmatchedLabelError,
    ad_loss,
    build_guidance_mask,
    content_loss,
    masked_ad_loss,
    total_loss,
)
from .backbone import Backbone
from .latent import LatentImage, as_tensor

log = logging.getLogger(__name__)

INIT_MODES = ("content", "noise", "region")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimizeConfig:
    iterations: int = 200
    lr: float = 0.05
    content_weight: float = 0.25
    seed: int = 0
    init: str = "content"
    t_max: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    fixed_timestep: int | None = None
    noisy_reference: bool = False
    cache_reference: bool = False  # reuse taps when a timestep repeats (fixed_timestep, N > t_max)

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.content_weight < 0:
            raise ValueError("content_weight must be >= 0")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizeResult:
    latent: LatentImage
    timesteps: list[int]
    losses: list[float] = field(default_factory=list)
    ad_losses: list[float] = field(default_factory=list)
    content_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    wall_time: float = 0.0

    def trace(self):
        return {
            "timesteps": self.timesteps,
            "loss": self.losses,
            "ad_loss": self.ad_losses,
            "content_loss": self.content_losses,
            "final_loss": self.final_loss,
        }


def timestep_schedule(iterations: int, t_max: int) -> list[int]:
    """Linearly decreasing timesteps ``round(t_max * (1 - k / N))``, clamped to >= 1."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    return [max(1, math.floor(t_max * (1 - k / iterations) + 0.5)) for k in range(iterations)]


def _timesteps(cfg: OptimizeConfig, backbone: Backbone) -> list[int]:
    if cfg.iterations == 0:
        return []
    if cfg.fixed_timestep is not None:
        return [backbone.schedule.check(cfg.fixed_timestep)] * cfg.iterations
    return timestep_schedule(cfg.iterations, cfg.t_max or backbone.t_max)


def optimize_latent(
    backbone: Backbone,
    init,
    style,
    cfg: OptimizeConfig,
    content=None,
    masks=None,
    callback=None,
) -> OptimizeResult:
    """Adam on a latent minimising ``AD(z, style) + content_weight * content(z, content)``.

    Reference and content taps are recomputed at every scheduled timestep.
    ``masks`` (one per selected layer) switches the AD term to its masked form.
    """
    cfg.validate()
    start = time.perf_counter()
    like = init if isinstance(init, LatentImage) else None
    z = torch.nn.Parameter(as_tensor(init).detach().clone().to(backbone.dtype))
    style = as_tensor(style).to(backbone.dtype)
    lam = cfg.content_weight
    use_content = lam > 0 and content is not None
    if use_content:
        content = as_tensor(content).to(backbone.dtype)
    opt = torch.optim.Adam([z], lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    timesteps = _timesteps(cfg, backbone)
    result = OptimizeResult(like.like(z.detach()) if like else LatentImage(z.detach()), timesteps)
    cache = {}

    def references(t):
        if cfg.cache_reference and t in cache:
            return cache[t]
        s = style
        if cfg.noisy_reference:
            s = backbone.add_noise(style, t, torch.randn(style.shape, generator=noise_gen, dtype=style.dtype))
        ref = backbone.extract(s, t)
        con = backbone.extract(content, t) if use_content else None
        if cfg.cache_reference:
            cache[t] = (ref, con)
        return ref, con

    def losses(taps, ref, con):
        ad = masked_ad_loss(taps, ref, masks) if masks is not None else ad_loss(taps, ref)
        c = content_loss(taps, con) if use_content else torch.zeros((), dtype=ad.dtype)
        return ad, c, total_loss(ad, c, lam if use_content else 0.0)

    ref = con = None
    for k, t in enumerate(timesteps):
        ref, con = references(t)
        taps = backbone.extract(z, t, grad=True)
        ad, c, loss = losses(taps, ref, con)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {float(loss.detach())} at iteration {k} (t={t})")
        opt.zero_grad(set_to_none=False)
        loss.backward()
        if not torch.isfinite(z.grad).all():
            raise NonFiniteError(f"non-finite gradient at iteration {k} (t={t})")
        opt.step()
        result.losses.append(float(loss.detach()))
        result.ad_losses.append(float(ad.detach()))
        result.content_losses.append(float(c.detach()))
        if callback is not None:
            callback(k, t, z.detach(), float(loss.detach()))
    if timesteps:
        with torch.no_grad():
            _, _, final = losses(backbone.extract(z, timesteps[-1]), ref, con)
        result.final_loss = float(final)
    result.latent = like.like(z.detach().clone()) if like else LatentImage(z.detach().clone())
    result.wall_time = time.perf_counter() - start
    if result.losses:
        log.info("optimized %d iterations: loss %.5f -> %.5f", len(timesteps), result.losses[0], result.final_loss)
    return result


def content_preserving_optimize(backbone: Backbone, style_image, content_image, cfg: OptimizeConfig | None = None,
                                callback=None) -> OptimizeResult:
    """Style/appearance transfer: start from the content latent and balance AD against content loss."""
    cfg = (cfg or OptimizeConfig()).validate()
    z_s = backbone.encode(style_image)
    z_c = backbone.encode(content_image)
    init = _initial_latent(cfg, z_c, backbone)
    return optimize_latent(backbone, init, z_s, cfg, content=z_c, callback=callback)


def texture_optimize(backbone: Backbone, example, cfg: OptimizeConfig | None = None, latent_hw=None,
                     callback=None) -> OptimizeResult:
    """Synthesize a texture by optimizing seeded Gaussian noise against the AD loss alone."""
    cfg = cfg or OptimizeConfig(iterations=100, content_weight=0.0, init="noise")
    if cfg.content_weight != 0 or cfg.init != "noise":
        raise ValueError("texture optimization uses content_weight=0 and init='noise'")
    z_s = backbone.encode(example)
    shape = z_s.data.shape if latent_hw is None else (z_s.data.shape[0], *latent_hw)
    init = z_s.like(_noise(shape, cfg.seed, backbone.dtype))
    return optimize_latent(backbone, init, z_s, cfg, callback=callback)


def _noise(shape, seed, dtype):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


def _initial_latent(cfg, z_content: LatentImage, backbone: Backbone) -> LatentImage:
    if cfg.init == "noise":
        return z_content.like(_noise(z_content.data.shape, cfg.seed, backbone.dtype))
    return z_content


def region_fill(image: torch.Tensor, src_seg, tgt_seg, seed: int = 0) -> torch.Tensor:
    """Fill each target pixel with a uniformly drawn source pixel of the same label."""
    src_seg, tgt_seg = np.asarray(src_seg), np.asarray(tgt_seg)
    if src_seg.shape != tuple(image.shape[-2:]):
        raise ValueError(f"source segmentation {src_seg.shape} does not match image {tuple(image.shape[-2:])}")
    rng = np.random.default_rng(seed)
    flat_src = image.reshape(image.shape[0], -1)
    src_labels = src_seg.reshape(-1)
    tgt_labels = tgt_seg.reshape(-1)
    index = np.empty(tgt_labels.shape, dtype=np.int64)
    for label in np.unique(tgt_labels):
        pool = np.flatnonzero(src_labels == label)
        if pool.size == 0:
            raise UnmatchedLabelError(f"target label {int(label)} does not appear in the source map")
        where = np.flatnonzero(tgt_labels == label)
        index[where] = rng.choice(pool, size=where.size, replace=True)
    out = flat_src[:, torch.from_numpy(index)]
    return out.reshape(image.shape[0], *tgt_seg.shape)


def layer_masks(backbone: Backbone, src_seg, tgt_seg, src_latent_hw, tgt_latent_hw):
    grids = zip(backbone.token_grids(src_latent_hw), backbone.token_grids(tgt_latent_hw))
    return build_guidance_mask(src_seg, tgt_seg, [(s, t) for s, t in grids])


def controlled_texture_optimize(backbone: Backbone, src_texture, src_seg, tgt_seg,
                                cfg: OptimizeConfig | None = None, callback=None) -> OptimizeResult:
    """Segmentation-controlled texture synthesis.

    The region-filled initialization doubles as the content reference, and
    the AD term is masked so target tokens only read same-label source tokens.
    """
    cfg = cfg or OptimizeConfig(content_weight=0.15, init="region")
    cfg.validate()
    if cfg.init != "region":
        raise ValueError("controlled texture synthesis uses init='region'")
    src_seg, tgt_seg = np.asarray(src_seg), np.asarray(tgt_seg)
    backbone.codec.check_size(tgt_seg.shape)
    z_s = backbone.encode(src_texture)
    init_image = region_fill(src_texture, src_seg, tgt_seg, cfg.seed)
    z0 = backbone.encode(init_image)
    masks = layer_masks(backbone, src_seg, tgt_seg, z_s.data.shape[-2:], z0.data.shape[-2:])
    return optimize_latent(backbone, z0, z_s, cfg, content=z0, masks=masks, callback=callback)
