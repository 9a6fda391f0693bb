"""Attention-distillation style, appearance and texture transfer on diffusion backbones."""

__version__ = "0.1.0"

from .attn_features import (
    AttentionTaps,
    GuidanceMask,
    LayerSelector,
    LayerTap,
    ad_loss,
    attention,
    build_guidance_mask,
    content_loss,
    masked_ad_loss,
    total_loss,
)
from .backbone import Backbone, DiffusionSchedule, build_toy, finetune_decoder, load_backbone
from .latent import LatentImage
from .optimize import (
    OptimizeConfig,
    content_preserving_optimize,
    controlled_texture_optimize,
    texture_optimize,
    timestep_schedule,
)
from .sample import (
    SamplerConfig,
    TilingSpec,
    adain,
    ddim_step,
    expand_texture,
    guided_sample,
    sdedit_init,
    tiled_predict,
)
