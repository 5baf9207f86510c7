"""Autoregressive image density model with a discretized logistic mixture head.

Everything runs on a small reverse-mode autodiff engine over numpy
(:mod:`causalpix.tensor`), so the full stack is inspectable on one CPU.
"""

__version__ = "0.1.0"

from .dlm import MixtureParams, Pixel, channel_logprob, pixel_logprob, sample_pixel, unpack_head  # noqa: E402
from .network import ModelConfig, Model, desk_config, forward, receptive_field  # noqa: E402

__all__ = [
    "__version__",
    "MixtureParams",
    "Pixel",
    "channel_logprob",
    "pixel_logprob",
    "sample_pixel",
    "unpack_head",
    "ModelConfig",
    "Model",
    "desk_config",
    "forward",
    "receptive_field",
]
