"""Diffusion sampling with attention-distillation guidance.

Every DDIM step is followed by a few Adam updates of the freshly denoised
latent against the AD loss, computed on features of the noised example at
the same timestep. The Adam state persists across steps, so the optimizer
manages the guidance strength instead of a hand-set scale.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import torch

from .attn_features import ad_loss, content_loss
from .backbone import Backbone
from .backbone.schedule import DiffusionSchedule, add_noise
from .latent import LatentImage, as_tensor
from .optimize import NonFiniteError

log = logging.getLogger(__name__)


class TilingError(ValueError):
    pass


@dataclass
class TilingSpec:
    """Overlapping windows in latent units; ``None`` means backbone-native window, half-window stride."""

    window: int | tuple[int, int] | None = None
    stride: int | tuple[int, int] | None = None
    max_windows: int = 4096

    def resolve(self, backbone: Backbone | None = None) -> tuple[tuple[int, int], tuple[int, int]]:
        window = self.window
        if window is None:
            if backbone is None or backbone.native_latent_hw is None:
                raise TilingError("no window size given and the backbone declares no native size")
            window = backbone.native_latent_hw
        window = (window, window) if isinstance(window, int) else tuple(window)
        stride = self.stride
        if stride is None:
            stride = (max(1, window[0] // 2), max(1, window[1] // 2))
        stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        if min(window) < 1 or min(stride) < 1:
            raise TilingError("window and stride must be positive")
        if stride[0] > window[0] or stride[1] > window[1]:
            raise TilingError(f"stride {stride} exceeds window {window}")
        return window, stride


def window_starts(size: int, window: int, stride: int) -> list[int]:
    if window > size:
        raise TilingError(f"window {window} exceeds latent size {size}")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def tile_windows(latent_hw, tiling: TilingSpec, backbone: Backbone | None = None):
    """``(y, x, h, w)`` windows covering a latent of size ``latent_hw``."""
    (wh, ww), (sh, sw) = tiling.resolve(backbone)
    H, W = latent_hw
    ys, xs = window_starts(H, wh, sh), window_starts(W, ww, sw)
    n = len(ys) * len(xs)
    if n > tiling.max_windows:
        # windows along each axis scale like size / stride
        scale = math.sqrt(n / tiling.max_windows)
        hint = (min(wh, math.ceil(sh * scale)), min(ww, math.ceil(sw * scale)))
        raise TilingError(f"{n} windows exceed the limit of {tiling.max_windows}; try stride {hint}")
    return [(y, x, wh, ww) for y in ys for x in xs]


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 7.0
    inner_steps: int = 2
    lr: float = 0.015
    content_weight: float = 0.0
    sdedit_strength: float | None = None
    tiling: TilingSpec | None = None
    seed: int = 0
    adain: bool = True
    reset_optimizer: bool = False
    track_loss: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.content_weight < 0:
            raise ValueError("content_weight must be >= 0")
        if self.sdedit_strength is not None and not 0 < self.sdedit_strength < 1:
            raise ValueError("sdedit_strength must lie in (0, 1)")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class StepRecord:
    t: int
    t_prev: int
    loss_before: float | None = None
    loss_after: float | None = None
    adain_error: float | None = None


@dataclass
class SampleResult:
    latent: LatentImage
    steps: list[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    def trace(self):
        return {"steps": [asdict(s) for s in self.steps], **self.notes}

    def non_increasing_fraction(self, tol: float = 1e-6) -> float:
        pairs = [(s.loss_before, s.loss_after) for s in self.steps if s.loss_after is not None]
        if not pairs:
            return float("nan")
        return sum(after <= before + tol for before, after in pairs) / len(pairs)


def ddim_step(z_t, t: int, t_prev: int, eps, schedule: DiffusionSchedule):
    """Deterministic DDIM update from ``t`` to ``t_prev`` given a noise estimate."""
    schedule.check(t)
    schedule.check(t_prev)
    if not t > t_prev:
        raise ValueError(f"need t > t_prev, got {t} -> {t_prev}")
    a_t, a_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    z0 = (z_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0 + math.sqrt(1 - a_prev) * eps


def adain(z, z_ref, eps: float = 1e-12):
    """Match per-channel spatial mean and (population) std of ``z`` to ``z_ref``."""
    z, z_ref = as_tensor(z), as_tensor(z_ref)
    if z.shape[0] != z_ref.shape[0]:
        raise ValueError(f"channel counts differ: {z.shape[0]} vs {z_ref.shape[0]}")
    flat, ref = z.flatten(1), z_ref.flatten(1)
    mu, sd = flat.mean(1, keepdim=True), flat.std(1, correction=0, keepdim=True)
    mu_r, sd_r = ref.mean(1, keepdim=True), ref.std(1, correction=0, keepdim=True)
    flat_sd = sd <= eps
    scaled = (flat - mu) / torch.where(flat_sd, torch.ones_like(sd), sd) * sd_r + mu_r
    out = torch.where(flat_sd, flat - mu + mu_r, scaled)
    return out.reshape(z.shape)


def channel_stats(z):
    flat = as_tensor(z).flatten(1)
    return flat.mean(1), flat.std(1, correction=0)


def sampling_timesteps(steps: int, t_max: int, t_start: int | None = None) -> list[int]:
    """Evenly spaced ``t_max -> 0`` timesteps; with ``t_start`` only those below it are kept."""
    full = sorted({math.floor(t_max * (1 - i / steps) + 0.5) for i in range(steps + 1)}, reverse=True)
    if t_start is None or t_start >= t_max:
        return full
    return [t_start] + [t for t in full if t < t_start]


def tiled_predict(backbone: Backbone, z, t: int, prompt: str, tiling: TilingSpec, cfg_scale: float = 1.0,
                  condition=None):
    """Noise prediction over overlapping windows, averaged uniformly where they overlap."""
    z = as_tensor(z)
    windows = tile_windows(z.shape[-2:], tiling, backbone)
    if len(windows) == 1 and windows[0][2:] == tuple(z.shape[-2:]):
        return backbone.predict_noise(z, t, prompt, cfg_scale, condition)
    total = torch.zeros_like(z)
    count = torch.zeros_like(z[:1])
    f = backbone.factor
    for y, x, h, w in windows:
        cond = None if condition is None else condition[..., y * f : (y + h) * f, x * f : (x + w) * f]
        total[:, y : y + h, x : x + w] += backbone.predict_noise(z[:, y : y + h, x : x + w], t, prompt, cfg_scale, cond)
        count[:, y : y + h, x : x + w] += 1
    return total / count


def sdedit_init(backbone: Backbone, layout_image, strength: float = 0.6, seed: int = 0):
    """Partially noise an encoded layout; returns ``(z_t_start, t_start)``."""
    if not 0 < strength < 1:
        raise ValueError("strength must lie in (0, 1)")
    t_start = max(1, math.floor(strength * backbone.t_max + 0.5))
    z0 = backbone.encode(layout_image)
    g = torch.Generator().manual_seed(seed + 2)
    noise = torch.randn(z0.data.shape, generator=g, dtype=torch.float64).to(backbone.dtype)
    return z0.like(backbone.add_noise(z0, t_start, noise)), t_start


def guided_sample(
    backbone: Backbone,
    style_image,
    cfg: SamplerConfig | None = None,
    prompt: str = "",
    content_image=None,
    init=None,
    latent_hw=None,
    condition=None,
    callback=None,
) -> SampleResult:
    """Attention-distillation guided DDIM sampling.

    ``init`` is an optional ``(latent, t_start)`` pair, e.g. from
    :func:`sdedit_init`; otherwise sampling starts from seeded Gaussian noise
    at ``t_max``. With ``cfg.tiling`` both the noise prediction and the AD
    loss are evaluated per window.
    """
    cfg = (cfg or SamplerConfig()).validate()
    schedule = backbone.schedule
    z_style = backbone.encode(style_image)
    style = z_style.data
    content = None
    if content_image is not None and cfg.content_weight > 0:
        content = backbone.encode(content_image).data
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(cfg.seed)
    ref_gen = torch.Generator().manual_seed(cfg.seed + 1)
    if init is None:
        hw = tuple(latent_hw) if latent_hw is not None else tuple(style.shape[-2:])
        z = torch.randn((style.shape[0], *hw), generator=gen, dtype=torch.float64).to(backbone.dtype)
        t_start = backbone.t_max
    else:
        z, t_start = as_tensor(init[0]).to(backbone.dtype), int(init[1])
    if content is not None and content.shape != z.shape:
        raise ValueError(f"content latent {tuple(content.shape)} does not match output latent {tuple(z.shape)}")
    timesteps = sampling_timesteps(cfg.steps, backbone.t_max, t_start)
    windows = None
    if cfg.tiling is not None:
        windows = tile_windows(z.shape[-2:], cfg.tiling, backbone)
        if len(windows) == 1 and windows[0][2:] == tuple(z.shape[-2:]):
            windows = None

    def predict(z, t):
        if cfg.tiling is not None:
            return tiled_predict(backbone, z, t, prompt, cfg.tiling, cfg.cfg_scale, condition)
        return backbone.predict_noise(z, t, prompt, cfg.cfg_scale, condition)

    def crops(x):
        if windows is None:
            return [x]
        return [x[:, y : y + h, xx : xx + w] for y, xx, h, w in windows]

    def guidance_loss(z, t, ref_taps, con_taps, grad):
        parts = []
        for i, crop in enumerate(crops(z)):
            taps = backbone.extract(crop, t, grad=grad)
            loss = ad_loss(taps, ref_taps)
            if con_taps is not None:
                loss = loss + cfg.content_weight * content_loss(taps, con_taps[i])
            parts.append(loss)
        return parts[0] if len(parts) == 1 else torch.stack(parts).mean()

    param = torch.nn.Parameter(z.detach().clone())
    opt = torch.optim.Adam([param], lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    result = SampleResult(z_style.like(z))
    result.notes["expansion_loss"] = "per-tile" if windows is not None else "global"
    for i, (t, t_prev) in enumerate(zip(timesteps[:-1], timesteps[1:])):
        z = ddim_step(z, t, t_prev, predict(z, t), schedule)
        record = StepRecord(t, t_prev)
        if cfg.adain or cfg.inner_steps > 0:
            ref_noise = torch.randn(style.shape, generator=ref_gen, dtype=torch.float64).to(backbone.dtype)
            z_ref = add_noise(style, t_prev, ref_noise, schedule)
            if cfg.adain:
                z = adain(z, z_ref)
                if cfg.track_loss:
                    (m, s), (m_r, s_r) = channel_stats(z), channel_stats(z_ref)
                    record.adain_error = float(torch.maximum((m - m_r).abs(), (s - s_r).abs()).max())
            if cfg.inner_steps > 0:
                ref_taps = backbone.extract(z_ref, t_prev)
                con_taps = None
                if content is not None:
                    noisy_content = add_noise(content, t_prev, _resize_noise(ref_noise, content.shape), schedule)
                    con_taps = [backbone.extract(c, t_prev) for c in crops(noisy_content)]
                if cfg.reset_optimizer:
                    opt = torch.optim.Adam([param], lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
                with torch.no_grad():
                    param.copy_(z)
                for m in range(cfg.inner_steps):
                    loss = guidance_loss(param, t_prev, ref_taps, con_taps, grad=True)
                    if m == 0:
                        record.loss_before = float(loss.detach())
                    if not torch.isfinite(loss):
                        raise NonFiniteError(f"non-finite guidance loss at step {i} (t={t_prev})")
                    opt.zero_grad(set_to_none=False)
                    loss.backward()
                    opt.step()
                if cfg.track_loss:
                    with torch.no_grad():
                        record.loss_after = float(guidance_loss(param, t_prev, ref_taps, con_taps, grad=False))
                    if record.loss_after > record.loss_before + 1e-6:
                        log.warning("step %d (t=%d): guidance loss rose %.6g -> %.6g",
                                    i, t_prev, record.loss_before, record.loss_after)
                z = param.detach().clone()
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"non-finite latent at step {i} (t={t} -> {t_prev})")
        result.steps.append(record)
        if callback is not None:
            callback(i, t_prev, z)
    result.latent = z_style.like(z)
    result.wall_time = time.perf_counter() - start
    return result


def _resize_noise(noise, shape):
    if noise.shape == shape:
        return noise
    reps = [math.ceil(s / n) for s, n in zip(shape, noise.shape)]
    return noise.repeat(*reps)[tuple(slice(0, s) for s in shape)]


def expand_texture(backbone: Backbone, example, target_hw, cfg: SamplerConfig | None = None, callback=None):
    """Synthesize a texture larger than the backbone's native size from one example.

    ``target_hw`` is in pixels. Returns ``(image, SampleResult)``; decoding
    uses whatever decoder ``backbone`` carries, so pass a backbone from
    ``with_decoder`` to use a fine-tuned one.
    """
    cfg = cfg or SamplerConfig(cfg_scale=1.0, inner_steps=3, lr=0.05, tiling=TilingSpec())
    if cfg.tiling is None:
        raise ValueError("texture expansion needs a tiling spec")
    H, W = target_hw
    if H < example.shape[-2] or W < example.shape[-1]:
        raise ValueError(f"target {H}x{W} is smaller than the example {tuple(example.shape[-2:])}")
    backbone.codec.check_size((H, W))
    f = backbone.factor
    result = guided_sample(backbone, example, cfg, latent_hw=(H // f, W // f), callback=callback)
    return backbone.decode(result.latent), result
