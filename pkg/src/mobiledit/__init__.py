"""Toy-scale pipeline for shrinking and accelerating a latent video diffusion transformer.

Submodules:
    flow        rectified-flow forward process, CFM loss, Euler sampler
    dit         the DiT backbone, param/FLOP accounting, checkpoints
    pruning     block/head/FFN masks, group-wise candidate search, densify
    kd          feature-alignment knowledge distillation
    adversarial few-step adversarial distillation with a DiT discriminator
    vae         toy video autoencoders and the compression-ratio study
    cli         the ``mobiledit`` command
"""

from .dit import DiT, DiTConfig, build_model, count_flops, count_params
from .errors import DependencyError, InfeasibleBudget, InvalidArgument, NumericFailure, SchemaError
from .flow import TimestepSchedule, cfm_loss, euler_step, make_schedule, noisify, predict_x0, sample

__version__ = "0.1.0"

__all__ = [
    "DiT", "DiTConfig", "build_model", "count_flops", "count_params",
    "DependencyError", "InfeasibleBudget", "InvalidArgument", "NumericFailure", "SchemaError",
    "TimestepSchedule", "cfm_loss", "euler_step", "make_schedule", "noisify", "predict_x0", "sample",
]
