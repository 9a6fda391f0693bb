from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch
import yaml

from ..attn_features import LayerSelector
from .codec import ToyCodec
from .core import Backbone, BackboneError
from .schedule import DiffusionSchedule
from .toy import ToyTextEncoder, ToyUNet

CACHE_ENV = "ATTNDISTILL_CACHE"

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "float16": torch.float16, "bfloat16": torch.bfloat16}

TOY_DEFAULTS = {
    "kind": "toy",
    "seed": 0,
    "t_max": 1000,
    "codec_factor": 4,
    "latent_channels": 4,
    "identity_codec": False,
    "channels": 32,
    "heads": 2,
    "layers": [4, 8, 4],
    "condition_channels": 0,
    "qk_gain": 0.3,
    "native_latent_hw": 16,
    "layer_selector": {"last": 6},
    "dtype": "float32",
}


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "attndistill"))


def read_descriptor(source) -> dict:
    """Normalise a descriptor given as a dict, a ``toy[:seed]`` string or a YAML/JSON file path."""
    if isinstance(source, dict):
        return dict(source)
    text = str(source)
    if text == "toy" or text.startswith("toy:"):
        _, _, seed = text.partition(":")
        return {"kind": "toy", "seed": int(seed) if seed else 0}
    path = Path(text)
    if not path.is_file():
        raise BackboneError(f"backbone descriptor not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise BackboneError(f"cannot parse backbone descriptor {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise BackboneError(f"backbone descriptor {path} must be a mapping")
    data.setdefault("_source", str(path))
    return data


def load_backbone(source) -> Backbone:
    """Build a ready backbone from a descriptor.

    ``kind: toy`` builds the seeded test network; ``kind: pretrained`` loads a
    diffusers-format latent-diffusion checkpoint after verifying its content
    hash.
    """
    desc = read_descriptor(source)
    kind = desc.get("kind")
    if kind == "toy":
        return build_toy(desc)
    if kind == "pretrained":
        from .pretrained import load_pretrained

        return load_pretrained(desc)
    raise BackboneError(f"unknown backbone kind {kind!r}")


def build_toy(desc: dict | None = None) -> Backbone:
    cfg = {**TOY_DEFAULTS, **(desc or {})}
    unknown = set(cfg) - set(TOY_DEFAULTS) - {"_source"}
    if unknown:
        raise BackboneError(f"unknown toy backbone fields: {sorted(unknown)}")
    layers = tuple(int(n) for n in cfg["layers"])
    if len(layers) != 3 or sum(layers) < 8:
        raise BackboneError(f"toy backbone needs three stages with >= 8 attention layers, got {layers}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(cfg["seed"]))
        unet = ToyUNet(
            latent_channels=3 if cfg["identity_codec"] else int(cfg["latent_channels"]),
            channels=int(cfg["channels"]),
            heads=int(cfg["heads"]),
            layers=layers,
            condition_channels=int(cfg["condition_channels"]),
            qk_gain=float(cfg["qk_gain"]),
        )
        codec = ToyCodec(
            factor=1 if cfg["identity_codec"] else int(cfg["codec_factor"]),
            latent_channels=int(cfg["latent_channels"]),
            identity=bool(cfg["identity_codec"]),
        )
    native = cfg["native_latent_hw"]
    native = (native, native) if isinstance(native, int) else tuple(native)
    return Backbone(
        unet,
        codec,
        DiffusionSchedule.scaled_linear(int(cfg["t_max"])),
        ToyTextEncoder(unet.context_dim),
        selector=LayerSelector.parse(cfg["layer_selector"]),
        name=f"toy(seed={cfg['seed']})",
        native_latent_hw=native,
        dtype=_DTYPES[cfg["dtype"]],
    )


def checkpoint_digest(path) -> str:
    """sha256 over every file below ``path`` (relative name and bytes, sorted by name)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    h = hashlib.sha256()
    for f in files:
        h.update(f.relative_to(path).as_posix().encode() if f != path else f.name.encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def resolve_checkpoint(desc: dict) -> Path:
    if "checkpoint" not in desc:
        raise BackboneError("pretrained descriptor needs a 'checkpoint' path")
    path = Path(os.path.expanduser(str(desc["checkpoint"])))
    if not path.is_absolute():
        base = Path(desc["_source"]).parent if "_source" in desc else cache_dir()
        candidates = [base / path, cache_dir() / path]
        path = next((c for c in candidates if c.exists()), candidates[0])
    if not path.exists():
        raise BackboneError(f"checkpoint not found: {path}")
    expected = desc.get("sha256")
    actual = checkpoint_digest(path)
    if expected is None:
        raise BackboneError(f"descriptor for {path} has no sha256; its content hash is {actual}")
    if actual != expected:
        raise BackboneError(f"checkpoint {path} is corrupt or changed: sha256 {actual} != {expected}")
    return path


def write_descriptor(desc: dict, path) -> None:
    path = Path(path)
    clean = {k: v for k, v in desc.items() if not k.startswith("_")}
    if path.suffix == ".json":
        path.write_text(json.dumps(clean, indent=2))
    else:
        path.write_text(yaml.safe_dump(clean, sort_keys=False))
