import numpy as np
import pytest
import torch

from attndistill import synthetic
from attndistill.attn_features import UnmatchedLabelError, ad_loss, attention
from attndistill.backbone import build_toy
from attndistill.latent import LatentImage
from attndistill.optimize import (
    NonFiniteError,
    OptimizeConfig,
    content_preserving_optimize,
    controlled_texture_optimize,
    layer_masks,
    optimize_latent,
    region_fill,
    texture_optimize,
    timestep_schedule,
)


def test_schedule_small_cases():
    assert timestep_schedule(2, 1000) == [1000, 500]
    assert timestep_schedule(1, 1000) == [1000]


def test_schedule_hundred_steps():
    ts = timestep_schedule(100, 1000)
    assert ts == [1000 - 10 * k for k in range(100)]
    assert all(a >= b for a, b in zip(ts, ts[1:]))
    assert ts[-1] == 10


def test_schedule_clamps_to_one():
    ts = timestep_schedule(300, 100)
    assert min(ts) == 1 and ts[0] == 100


def test_schedule_rejects_zero():
    with pytest.raises(ValueError):
        timestep_schedule(0, 1000)


@pytest.mark.parametrize("kwargs", [{"lr": 0}, {"content_weight": -1}, {"iterations": -1}, {"init": "zeros"}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizeConfig(**kwargs).validate()


def test_identical_inputs_zero_gradient(toy64):
    image = synthetic.blobs(64, 64, seed=5)
    z = toy64.encode(image)
    var = z.data.clone().requires_grad_(True)
    ref = toy64.extract(z, 1000)
    loss = ad_loss(toy64.extract(var, 1000, grad=True), ref)
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(var.grad) == 0
    res = content_preserving_optimize(toy64, image, image, OptimizeConfig(iterations=3))
    assert res.losses == [0.0, 0.0, 0.0]
    assert torch.equal(res.latent.data, z.data)


def test_lambda_zero_skips_content_taps(style_image, content_image):
    bb = build_toy({"dtype": "float64"})
    bb.forward_calls = 0
    content_preserving_optimize(bb, style_image, content_image, OptimizeConfig(iterations=4, content_weight=0.0))
    assert bb.forward_calls == 2 * 4 + 1
    bb.forward_calls = 0
    content_preserving_optimize(bb, style_image, content_image, OptimizeConfig(iterations=4, content_weight=0.3))
    assert bb.forward_calls == 3 * 4 + 1


def test_backbone_weights_unchanged(toy64, style_image, content_image):
    before = [p.clone() for p in toy64.unet.parameters()] + [p.clone() for p in toy64.codec.parameters()]
    content_preserving_optimize(toy64, style_image, content_image, OptimizeConfig(iterations=3))
    after = list(toy64.unet.parameters()) + list(toy64.codec.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_gradient_uses_attention_residual_branch(style_image, content_image):
    bb = build_toy({"dtype": "float64"})
    z = bb.encode(content_image).data
    ref = bb.extract(bb.encode(style_image), 500)

    def grad():
        var = z.clone().requires_grad_(True)
        ad_loss(bb.extract(var, 500, grad=True), ref).backward()
        return var.grad

    full = grad()
    for layer in bb.unet.attention_layers[:10]:
        layer.residual_scale = 0.0
    identity_only = grad()
    assert full.abs().sum() > 0 and identity_only.abs().sum() > 0
    assert not torch.allclose(full, identity_only)


def test_texture_seeds_differ(toy32):
    example = synthetic.blobs(64, 64, seed=2)
    a = texture_optimize(toy32, example, OptimizeConfig(iterations=100, content_weight=0, init="noise", seed=0))
    b = texture_optimize(toy32, example, OptimizeConfig(iterations=100, content_weight=0, init="noise", seed=1))
    assert (a.latent.data - b.latent.data).abs().mean() > 0.01
    assert a.final_loss < a.losses[0] and b.final_loss < b.losses[0]


def test_texture_defaults_and_zero_iterations(toy64):
    example = synthetic.stripes(32, 32)
    res = texture_optimize(toy64, example, OptimizeConfig(iterations=0, content_weight=0, init="noise", seed=3))
    g = torch.Generator().manual_seed(3)
    assert torch.equal(res.latent.data, torch.randn(4, 8, 8, generator=g, dtype=torch.float64))
    assert res.losses == [] and res.timesteps == []
    with pytest.raises(ValueError):
        texture_optimize(toy64, example, OptimizeConfig(iterations=1, content_weight=0.2, init="noise"))


def test_texture_larger_output(toy64):
    res = texture_optimize(toy64, synthetic.checker(32, 32), OptimizeConfig(iterations=2, content_weight=0, init="noise"),
                           latent_hw=(12, 16))
    assert res.latent.shape == (4, 12, 16)


def test_non_finite_aborts_with_iteration(toy64):
    style = synthetic.stripes(32, 32)
    style[:, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="iteration 0"):
        content_preserving_optimize(toy64, style, synthetic.scene(32, 32), OptimizeConfig(iterations=2))


def test_cached_reference_matches_recomputed(toy64, style_image, content_image):
    kwargs = dict(iterations=6, fixed_timestep=300)
    exact = content_preserving_optimize(toy64, style_image, content_image, OptimizeConfig(**kwargs))
    calls = toy64.forward_calls
    cached = content_preserving_optimize(toy64, style_image, content_image,
                                         OptimizeConfig(**kwargs, cache_reference=True))
    # reference + content taps once, target taps every iteration, one final evaluation
    assert toy64.forward_calls - calls == 2 + 6 + 1
    assert abs(cached.final_loss - exact.final_loss) <= 1e-3 * exact.final_loss


def test_fixed_timestep_option(toy64, style_image, content_image):
    res = content_preserving_optimize(toy64, style_image, content_image, OptimizeConfig(iterations=3, fixed_timestep=200))
    assert res.timesteps == [200, 200, 200]


def test_result_keeps_latent_metadata(toy64, style_image, content_image):
    res = content_preserving_optimize(toy64, style_image, content_image, OptimizeConfig(iterations=1))
    assert isinstance(res.latent, LatentImage) and res.latent.image_hw == (64, 64)
    trace = res.trace()
    assert trace["timesteps"] == [1000] and len(trace["loss"]) == 1


# controlled texture ------------------------------------------------------------------


def test_region_fill_same_maps_is_per_label_shuffle():
    image, seg = synthetic.two_texture_image(32, 32)
    out = region_fill(image, seg, seg, seed=4)
    for label in np.unique(seg):
        where = torch.from_numpy(seg == label)
        src = set(map(tuple, image[:, where].T.tolist()))
        assert set(map(tuple, out[:, where].T.tolist())) <= src


def test_region_fill_deterministic_and_unmatched():
    image, seg = synthetic.two_texture_image(16, 16)
    assert torch.equal(region_fill(image, seg, seg, 1), region_fill(image, seg, seg, 1))
    with pytest.raises(UnmatchedLabelError):
        region_fill(image, seg, np.full((16, 16), 7), 0)


def test_layer_masks_same_maps(toy64):
    _, seg = synthetic.two_texture_image(64, 64)
    masks = layer_masks(toy64, seg, seg, (16, 16), (16, 16))
    assert len(masks) == 6
    for m in masks:
        lab = m.src_labels
        assert torch.equal(m.matrix, torch.from_numpy(lab[:, None] == lab[None, :]))


def test_single_label_reduces_to_unmasked(toy64):
    src = synthetic.blobs(32, 32, seed=6)
    seg = np.zeros((32, 32), dtype=np.int64)
    cfg = OptimizeConfig(iterations=3, content_weight=0.15, init="region")
    res = controlled_texture_optimize(toy64, src, seg, seg, cfg)
    z0 = toy64.encode(region_fill(src, seg, seg, cfg.seed))
    plain = optimize_latent(toy64, z0, toy64.encode(src), cfg, content=z0)
    assert res.losses == pytest.approx(plain.losses, rel=1e-7)


def test_controlled_no_cross_label_weights(toy64):
    src, src_seg = synthetic.two_texture_image(64, 64)
    tgt_seg = np.ascontiguousarray(src_seg[:, ::-1])
    masks = layer_masks(toy64, src_seg, tgt_seg, (16, 16), (16, 16))
    target = toy64.extract(toy64.encode(region_fill(src, src_seg, tgt_seg)), 400)
    reference = toy64.extract(toy64.encode(src), 400)
    for tap, ref, m in zip(target, reference, masks):
        _, w = attention(tap.q, ref.k, ref.v, m, return_weights=True)
        cross = torch.from_numpy(m.tgt_labels[:, None] != m.src_labels[None, :])
        assert cross.any() and (w[:, cross] == 0).all()
    res = controlled_texture_optimize(toy64, src, src_seg, tgt_seg, OptimizeConfig(iterations=2, content_weight=0.15,
                                                                                     init="region"))
    assert res.latent.shape == (4, 16, 16)


def test_controlled_unmatched_label(toy64):
    src, seg = synthetic.two_texture_image(32, 32)
    with pytest.raises(UnmatchedLabelError):
        controlled_texture_optimize(toy64, src, seg, np.full((32, 32), 5))
