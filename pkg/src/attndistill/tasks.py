"""Task-level runs: configuration, per-task defaults, dispatch and run manifests."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import yaml

from . import __version__
from .backbone import Backbone, BackboneError, finetune_decoder, load_backbone, read_descriptor
from .image_io import load_image, load_labels, pixel_sha256, save_image
from .optimize import (
    OptimizeConfig,
    content_preserving_optimize,
    controlled_texture_optimize,
    texture_optimize,
)
from .sample import SamplerConfig, TilingSpec, expand_texture, guided_sample, sdedit_init

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TASKS = (
    "style-transfer",
    "appearance-transfer",
    "t2i-style",
    "texture",
    "texture-controlled",
    "texture-expand",
    "layout-texture",
)

REQUIRED = {
    "style-transfer": ("style", "content"),
    "appearance-transfer": ("style", "content"),
    "t2i-style": ("style", "prompt"),
    "texture": ("style",),
    "texture-controlled": ("style", "seg_src", "seg_tgt"),
    "texture-expand": ("style", "size"),
    "layout-texture": ("style", "layout"),
}

_OPT = {"lr": 0.05, "iterations": 200}
_SAMPLE = {"steps": 50, "cfg_scale": 1.0, "inner_steps": 2, "lr": 0.05}
DEFAULTS = {
    "style-transfer": {"mode": "optimize", **_OPT, "content_weight": 0.25},
    "appearance-transfer": {"mode": "optimize", **_OPT, "content_weight": 0.2},
    "texture": {"mode": "optimize", **_OPT, "iterations": 100, "content_weight": 0.0},
    "texture-controlled": {"mode": "optimize", **_OPT, "content_weight": 0.15},
    "t2i-style": {"mode": "sample", **_SAMPLE, "cfg_scale": 7.0, "lr": 0.015},
    "texture-expand": {"mode": "sample", **_SAMPLE, "inner_steps": 3},
    "layout-texture": {"mode": "sample", **_SAMPLE, "content_weight": 0.15, "sdedit_strength": 0.6},
}

OVERRIDES = ("content_weight", "lr", "iterations", "steps", "cfg_scale", "inner_steps", "sdedit_strength")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class TaskConfig:
    task: str
    out: str
    style: str | None = None
    content: str | None = None
    prompt: str = ""
    seg_src: str | None = None
    seg_tgt: str | None = None
    layout: str | None = None
    size: list[int] | None = None
    backbone: str | dict = "toy"
    seed: int = 0
    vae_finetune: bool = False
    vae_steps: int = 50
    content_weight: float | None = None
    lr: float | None = None
    iterations: int | None = None
    steps: int | None = None
    cfg_scale: float | None = None
    inner_steps: int | None = None
    sdedit_strength: float | None = None
    tile_window: int | None = None
    tile_stride: int | None = None
    schema_version: int = SCHEMA_VERSION
    base_dir: str | None = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "TaskConfig":
        data = dict(data)
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version}, expected {SCHEMA_VERSION}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for name in ("task", "out"):
            if not data.get(name):
                raise ConfigError(name, "is required")
        cfg = cls(**data)
        if base_dir is not None and cfg.base_dir is None:
            cfg.base_dir = str(base_dir)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def params(self) -> dict:
        """Task defaults with explicit overrides applied."""
        if self.task not in DEFAULTS:
            raise ConfigError("task", f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        params = dict(DEFAULTS[self.task])
        for name in OVERRIDES:
            value = getattr(self, name)
            if value is not None:
                params[name] = value
        return params

    def validate(self) -> "TaskConfig":
        params = self.params()
        for name in REQUIRED[self.task]:
            if not getattr(self, name):
                raise ConfigError(name, f"is required for task {self.task!r}")
        if self.size is not None and (len(self.size) != 2 or min(self.size) < 1):
            raise ConfigError("size", "must be [height, width]")
        if params.get("content_weight", 0) < 0:
            raise ConfigError("content_weight", "must be >= 0")
        if params["lr"] <= 0:
            raise ConfigError("lr", "must be > 0")
        for name in ("iterations", "steps"):
            if name in params and params[name] < 1:
                raise ConfigError(name, "must be >= 1")
        if params.get("inner_steps", 0) < 0:
            raise ConfigError("inner_steps", "must be >= 0")
        if params.get("cfg_scale", 1.0) < 1 and self.prompt:
            raise ConfigError("cfg_scale", "must be >= 1 with a prompt")
        s = params.get("sdedit_strength")
        if s is not None and not 0 < s < 1:
            raise ConfigError("sdedit_strength", "must lie in (0, 1)")
        if not str(self.out).lower().endswith(".png"):
            raise ConfigError("out", "output must be a .png path")
        return self

    def path(self, value) -> Path:
        p = Path(value)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p


def load_task_config(path) -> TaskConfig:
    """Read a YAML/JSON task config, or the ``config`` section of a run manifest."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must contain a mapping")
    if "config" in data and "output_sha256" in data:
        data = data["config"]
    return TaskConfig.from_dict(data, base_dir=path.parent)


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


@dataclass
class RunOutput:
    image: torch.Tensor
    manifest: dict
    image_path: Path
    manifest_path: Path


def _load(cfg: TaskConfig, name: str) -> torch.Tensor:
    return load_image(cfg.path(getattr(cfg, name)))


def _check_codec(backbone: Backbone, cfg: TaskConfig, name: str, hw):
    try:
        backbone.codec.check_size(tuple(hw))
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from exc


def run_task(cfg: TaskConfig, backbone: Backbone | None = None) -> RunOutput:
    """Run one task end to end and write the image plus its manifest next to it."""
    cfg.validate()
    params = cfg.params()
    source = cfg.backbone
    if isinstance(source, str) and not source.startswith("toy"):
        source = cfg.path(source)
    if backbone is None:
        backbone = load_backbone(source)

    style = _load(cfg, "style")
    _check_codec(backbone, cfg, "style", style.shape[-2:])
    inputs = {"style": style}
    for name in ("content", "layout"):
        if getattr(cfg, name):
            inputs[name] = _load(cfg, name)
            _check_codec(backbone, cfg, name, inputs[name].shape[-2:])
    if cfg.task == "texture-expand":
        _check_codec(backbone, cfg, "size", cfg.size)

    start = time.perf_counter()
    trace, notes = _dispatch(cfg, params, backbone, inputs)
    latent = trace.pop("latent")
    decoder_losses = None
    if cfg.vae_finetune:
        tuned = finetune_decoder(backbone, style, steps=cfg.vae_steps)
        backbone = backbone.with_decoder(tuned.decoder)
        decoder_losses = tuned.losses
    image = backbone.decode(latent).float().cpu()
    wall = time.perf_counter() - start

    out = cfg.path(cfg.out)
    digest = pixel_sha256(image)
    save_image(image, out, seed=cfg.seed, metadata={"task": cfg.task, "attndistill": __version__})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "config": _portable(cfg),
        "params": params,
        "seed": cfg.seed,
        "backbone": _describe(source),
        "trace": trace,
        "notes": notes,
        "decoder_finetune_losses": decoder_losses,
        "wall_time_s": wall,
        "output": out.name,
        "output_sha256": digest,
        "versions": {"attndistill": __version__, "torch": torch.__version__},
    }
    mpath = manifest_path(out)
    mpath.write_text(json.dumps(manifest, indent=2))
    return RunOutput(image, manifest, out, mpath)


PATH_FIELDS = ("style", "content", "seg_src", "seg_tgt", "layout", "out")


def _portable(cfg: TaskConfig) -> dict:
    """Config with resolved paths, so the manifest re-runs from any directory."""
    d = cfg.to_dict()
    for name in PATH_FIELDS:
        if d[name]:
            d[name] = str(cfg.path(d[name]).resolve())
    if isinstance(d["backbone"], str) and not d["backbone"].startswith("toy"):
        d["backbone"] = str(cfg.path(d["backbone"]).resolve())
    return d


def _describe(source):
    try:
        desc = read_descriptor(source)
    except BackboneError:
        return str(source)
    return {k: v for k, v in desc.items() if not k.startswith("_")}


def _dispatch(cfg: TaskConfig, params: dict, backbone: Backbone, inputs: dict):
    task, seed = cfg.task, cfg.seed
    style = inputs["style"]
    notes = {}
    if params["mode"] == "optimize":
        ocfg = OptimizeConfig(iterations=params["iterations"], lr=params["lr"],
                              content_weight=params["content_weight"], seed=seed)
        if task in ("style-transfer", "appearance-transfer"):
            res = content_preserving_optimize(backbone, style, inputs["content"], ocfg)
        elif task == "texture":
            ocfg.init = "noise"
            hw = None
            if cfg.size is not None:
                _check_codec(backbone, cfg, "size", cfg.size)
                hw = (cfg.size[0] // backbone.factor, cfg.size[1] // backbone.factor)
            res = texture_optimize(backbone, style, ocfg, latent_hw=hw)
        else:
            ocfg.init = "region"
            src = load_labels(cfg.path(cfg.seg_src))
            tgt = load_labels(cfg.path(cfg.seg_tgt))
            if src.shape != tuple(style.shape[-2:]):
                raise ConfigError("seg_src", f"label map {src.shape} does not match the style image")
            _check_codec(backbone, cfg, "seg_tgt", tgt.shape)
            res = controlled_texture_optimize(backbone, style, src, tgt, ocfg)
        return {"latent": res.latent, **res.trace()}, notes

    scfg = SamplerConfig(steps=params["steps"], cfg_scale=params["cfg_scale"], inner_steps=params["inner_steps"],
                         lr=params["lr"], content_weight=params.get("content_weight", 0.0),
                         sdedit_strength=params.get("sdedit_strength"), seed=seed, track_loss=True)
    if task == "t2i-style":
        hw = None
        if cfg.size is not None:
            _check_codec(backbone, cfg, "size", cfg.size)
            hw = (cfg.size[0] // backbone.factor, cfg.size[1] // backbone.factor)
        res = guided_sample(backbone, style, scfg, prompt=cfg.prompt, latent_hw=hw)
    elif task == "texture-expand":
        scfg.tiling = TilingSpec(cfg.tile_window, cfg.tile_stride)
        _, res = expand_texture(backbone, style, tuple(cfg.size), scfg)
    else:
        layout = inputs["layout"]
        init = sdedit_init(backbone, layout, scfg.sdedit_strength, seed)
        res = guided_sample(backbone, style, scfg, prompt=cfg.prompt, content_image=layout, init=init)
        notes["t_start"] = init[1]
    return {"latent": res.latent, **res.trace()}, notes
