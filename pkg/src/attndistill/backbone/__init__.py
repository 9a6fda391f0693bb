from .codec import ToyCodec
from .core import Backbone, BackboneError, FinetuneResult, finetune_decoder
from .loader import build_toy, checkpoint_digest, load_backbone, read_descriptor
from .schedule import DiffusionSchedule, add_noise

__all__ = [
    "Backbone",
    "BackboneError",
    "DiffusionSchedule",
    "FinetuneResult",
    "ToyCodec",
    "add_noise",
    "build_toy",
    "checkpoint_digest",
    "finetune_decoder",
    "load_backbone",
    "read_descriptor",
]
