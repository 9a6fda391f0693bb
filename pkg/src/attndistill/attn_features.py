"""Self-attention features and the losses built on them.

Taps hold per-head query/key/value tensors shaped ``[heads, tokens, dim]``.
All losses use an L1 distance reduced by the mean over elements of a layer,
followed by the mean over the selected layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class EmptyAttentionRowError(ValueError):
    """A query would attend to no key at all."""


class UnmatchedLabelError(ValueError):
    """A target label has no counterpart in the source segmentation."""


@dataclass
class LayerTap:
    layer_id: int
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    token_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.q.ndim != 3 or self.k.ndim != 3 or self.v.ndim != 3:
            raise ValueError(f"layer {self.layer_id}: taps must be [heads, tokens, dim]")
        if not (self.q.shape[0] == self.k.shape[0] == self.v.shape[0]):
            raise ValueError(f"layer {self.layer_id}: head count differs between q/k/v")
        if self.q.shape[-1] != self.k.shape[-1]:
            raise ValueError(f"layer {self.layer_id}: q and k head dims differ")
        if self.k.shape[1] != self.v.shape[1]:
            raise ValueError(f"layer {self.layer_id}: k and v token counts differ")

    def detach(self) -> "LayerTap":
        return LayerTap(self.layer_id, self.q.detach(), self.k.detach(), self.v.detach(), self.token_hw)


@dataclass
class AttentionTaps:
    layers: list[LayerTap] = field(default_factory=list)

    def __post_init__(self):
        ids = self.layer_ids
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"layer ids must be strictly increasing, got {ids}")

    @property
    def layer_ids(self) -> list[int]:
        return [tap.layer_id for tap in self.layers]

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> LayerTap:
        return self.layers[i]

    def detach(self) -> "AttentionTaps":
        return AttentionTaps([tap.detach() for tap in self.layers])


@dataclass(frozen=True)
class LayerSelector:
    """Chooses the self-attention layers that feed the losses.

    Either the last ``last`` layers of the backbone or an explicit id list.
    """

    last: int | None = 6
    ids: tuple[int, ...] | None = None

    def select(self, available: Sequence[int]) -> list[int]:
        available = list(available)
        if not available:
            raise ValueError("backbone declares no self-attention layers")
        if self.ids is not None:
            missing = sorted(set(self.ids) - set(available))
            if missing:
                raise ValueError(f"selected layers {missing} do not exist in the backbone")
            return sorted(set(self.ids))
        n = self.last if self.last is not None else len(available)
        if n < 1 or n > len(available):
            raise ValueError(f"cannot select the last {n} of {len(available)} layers")
        return available[-n:]

    @classmethod
    def parse(cls, value) -> "LayerSelector":
        """Build a selector from a config value: int, list of ids, dict or ``"last:N"``."""
        if value is None:
            return cls()
        if isinstance(value, LayerSelector):
            return value
        if isinstance(value, int):
            return cls(last=value)
        if isinstance(value, str):
            kind, _, n = value.partition(":")
            if kind == "last" and n.isdigit():
                return cls(last=int(n))
            if kind == "all":
                return cls(last=None)
            raise ValueError(f"unrecognised layer selector {value!r}")
        if isinstance(value, dict):
            if "ids" in value:
                return cls(last=None, ids=tuple(int(i) for i in value["ids"]))
            return cls(last=value.get("last", 6))
        return cls(last=None, ids=tuple(int(i) for i in value))

    def to_config(self):
        return {"ids": list(self.ids)} if self.ids is not None else {"last": self.last}


def attention(q, k, v, mask=None, return_weights=False):
    """``softmax(q kᵀ / sqrt(d)) v`` per head, with an optional boolean mask.

    ``mask`` is ``[n_q, n_k]`` (or broadcastable with leading head dims); False
    entries receive a ``-inf`` logit and therefore exactly zero weight.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ValueError(
            f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    logits = (q @ k.transpose(-1, -2)) * q.shape[-1] ** -0.5
    if mask is not None:
        mask = _mask_tensor(mask, q.device)
        if mask.shape[-2:] != logits.shape[-2:]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match logits {tuple(logits.shape[-2:])}")
        empty = ~mask.any(dim=-1)
        if bool(empty.any()):
            rows = torch.nonzero(empty.reshape(-1)).flatten()[:5].tolist()
            raise EmptyAttentionRowError(f"empty attention row(s), e.g. query index {rows}")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = logits.softmax(dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def _mask_tensor(mask, device):
    if isinstance(mask, GuidanceMask):
        mask = mask.matrix
    mask = torch.as_tensor(mask, device=device)
    if mask.dtype != torch.bool:
        raise TypeError("attention masks must be boolean")
    return mask


def _check_layers(a: AttentionTaps, b: AttentionTaps):
    if a.layer_ids != b.layer_ids:
        raise ValueError(f"mismatched layer sets: {a.layer_ids} vs {b.layer_ids}")
    if not a.layers:
        raise ValueError("no layers to compare")


def ad_loss(target: AttentionTaps, reference: AttentionTaps) -> torch.Tensor:
    """Attention distillation loss.

    Per layer, the L1 gap between the target's own attention output and the
    output obtained by attending the target queries over the reference keys
    and values.
    """
    return masked_ad_loss(target, reference, None)


def masked_ad_loss(target: AttentionTaps, reference: AttentionTaps, masks) -> torch.Tensor:
    """AD loss where the reference branch only sees same-label source tokens.

    ``masks`` is one mask per layer (``GuidanceMask`` or bool tensor), or None.
    The target branch is never masked.
    """
    _check_layers(target, reference)
    if masks is not None and len(masks) != len(target.layers):
        raise ValueError(f"expected {len(target.layers)} masks, got {len(masks)}")
    per_layer = []
    for i, (tap, ref) in enumerate(zip(target.layers, reference.layers)):
        if tap.q.shape[0] != ref.k.shape[0] or tap.q.shape[-1] != ref.k.shape[-1]:
            raise ValueError(f"layer {tap.layer_id}: head count/dim differ between branches")
        current = attention(tap.q, tap.k, tap.v)
        mask = None if masks is None else masks[i]
        ideal = attention(tap.q, ref.k.detach(), ref.v.detach(), mask=mask)
        per_layer.append((current - ideal).abs().mean())
    return torch.stack(per_layer).mean()


def content_loss(target: AttentionTaps, content: AttentionTaps) -> torch.Tensor:
    """Mean absolute difference between target and content queries."""
    _check_layers(target, content)
    per_layer = []
    for tap, ref in zip(target.layers, content.layers):
        if tap.q.shape != ref.q.shape:
            raise ValueError(
                f"layer {tap.layer_id}: query shapes differ {tuple(tap.q.shape)} vs {tuple(ref.q.shape)}"
            )
        per_layer.append((tap.q - ref.q.detach()).abs().mean())
    return torch.stack(per_layer).mean()


def total_loss(ad, content, lam: float):
    if lam < 0:
        raise ValueError(f"content weight must be non-negative, got {lam}")
    if lam == 0:
        return ad
    return ad + lam * content


@dataclass
class GuidanceMask:
    """Boolean ``[target tokens, source tokens]`` matrix plus the label grids it came from."""

    matrix: torch.Tensor
    src_labels: np.ndarray
    tgt_labels: np.ndarray

    @property
    def shape(self):
        return tuple(self.matrix.shape)


def downsample_labels(labels, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour label downsampling; samples the centre of each block."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("label maps must hold integer labels")
    H, W = labels.shape
    h, w = hw
    if h < 1 or w < 1 or H % h or W % w:
        raise ValueError(f"token grid {h}x{w} does not divide label map {H}x{W}")
    fy, fx = H // h, W // w
    return labels[fy // 2 :: fy, fx // 2 :: fx][:h, :w]


def build_guidance_mask(src_seg, tgt_seg, token_hw) -> list[GuidanceMask]:
    """One guidance mask per layer grid in ``token_hw``.

    Each entry of ``token_hw`` is either ``(h, w)`` applied to both maps or a
    pair ``((h_src, w_src), (h_tgt, w_tgt))``. Entry ``[j, i]`` of a mask is
    true when target token ``j`` and source token ``i`` share a label.
    """
    masks = []
    for hw in token_hw:
        if isinstance(hw[0], (tuple, list)):
            src_hw, tgt_hw = tuple(hw[0]), tuple(hw[1])
        else:
            src_hw = tgt_hw = tuple(hw)
        src = downsample_labels(src_seg, src_hw).reshape(-1)
        tgt = downsample_labels(tgt_seg, tgt_hw).reshape(-1)
        missing = sorted(set(np.unique(tgt).tolist()) - set(np.unique(src).tolist()))
        if missing:
            raise UnmatchedLabelError(
                f"target labels {missing} do not appear in the source map at grid {src_hw}"
            )
        matrix = torch.from_numpy(tgt[:, None] == src[None, :])
        masks.append(GuidanceMask(matrix, src, tgt))
    return masks
