"""Ablation heads and configurations.

* ``softmax_head``: 256-way softmax per channel with logits that depend
  linearly on earlier channels of the same pixel (1536 outputs per pixel).
* ``dequantized``: continuous logistic mixture density on ``x + u - 0.5``,
  which yields a variational lower bound on the discrete log-likelihood.
* ``no_shortcut``, ``no_dropout``: the baseline with one feature removed.
* ``small_field_plain``: no down/up-sampling, depth limited to a fixed field.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dlm import MixtureParams, centered, shifted_means
from .network import FIELD_11X5, ModelConfig, desk_config
from .tensor import Tensor

N_VALUES = 256
ABLATIONS = ("softmax_head", "dequantized", "no_shortcut", "no_dropout", "small_field_plain")

# Config fields each ablation is allowed to touch.
ABLATION_FIELDS = {
    "softmax_head": {"likelihood"},
    "dequantized": {"likelihood"},
    "no_shortcut": {"use_shortcuts"},
    "no_dropout": {"dropout_rate"},
    "small_field_plain": {"use_downsampling", "small_field"},
}


def ablation_config(name: str, base: ModelConfig | None = None) -> tuple[ModelConfig, str]:
    """Return (config, likelihood) for the named ablation of ``base``.

    ``base`` defaults to the desk config.
    """
    base = desk_config() if base is None else base
    if name == "baseline":
        cfg = base
    elif name == "softmax_head":
        cfg = base.replace(likelihood="softmax")
    elif name == "dequantized":
        cfg = base.replace(likelihood="dequantized")
    elif name == "no_shortcut":
        cfg = base.replace(use_shortcuts=False)
    elif name == "no_dropout":
        cfg = base.replace(dropout_rate=0.0)
    elif name == "small_field_plain":
        cfg = base.replace(use_downsampling=False, small_field=FIELD_11X5)
    else:
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return cfg, cfg.likelihood


def config_diff(a: ModelConfig, b: ModelConfig) -> set[str]:
    da, db = a.to_dict(), b.to_dict()
    return {k for k in da if da[k] != db[k]}


# ---------------------------------------------------------------------------
# softmax head


def split_softmax_head(head: Tensor):
    """Split [..., 1536] into base logits and coefficients, each [..., 3, 256].

    Coefficient rows are (green-on-red, blue-on-red, blue-on-green).
    """
    if head.shape[-1] != 6 * N_VALUES:
        raise T.ShapeError(f"softmax head needs {6 * N_VALUES} channels, got {head.shape[-1]}")
    h = head.reshape(head.shape[:-1] + (6, N_VALUES))
    return h[..., 0:3, :], h[..., 3:6, :]


def softmax_channel_logprobs(x, head) -> Tensor:
    """Per-channel conditional log-probabilities, shape = x.shape."""
    head = head if isinstance(head, Tensor) else Tensor(head)
    x = np.asarray(x)
    if x.shape[-1] != 3 or x.shape[:-1] != head.shape[:-1]:
        raise T.ShapeError(f"pixels {x.shape} do not match head {head.shape}")
    base, coef = split_softmax_head(head)
    rc = centered(x[..., 0])[..., None]
    gc = centered(x[..., 1])[..., None]
    logit_r = base[..., 0, :]
    logit_g = base[..., 1, :] + coef[..., 0, :] * rc
    logit_b = base[..., 2, :] + coef[..., 1, :] * rc + coef[..., 2, :] * gc
    onehot = np.eye(N_VALUES, dtype=head.dtype)[x.astype(np.int64)]
    parts = [(T.log_softmax(logits, axis=-1) * onehot[..., c, :]).sum(axis=-1, keepdims=True)
             for c, logits in enumerate((logit_r, logit_g, logit_b))]
    return T.concat(parts, axis=-1)


def softmax_logprob(x, head) -> Tensor:
    """Differentiable log P(pixel) under the softmax head, shape = x.shape[:-1]."""
    return softmax_channel_logprobs(x, head).sum(axis=-1)


def softmax_pixel_logprob(pixel, head) -> float:
    """log P(r, g, b) for one pixel given its 1536 head outputs."""
    p = np.asarray(tuple(pixel), dtype=np.int64)
    head = np.asarray(head.data if isinstance(head, Tensor) else head, dtype=np.float64)
    return float(softmax_logprob(p, head).data)


def softmax_conditional_logprobs(head, r=None, g=None) -> np.ndarray:
    """Log PMF over 0..255 of the next channel given the observed prefix."""
    head = np.asarray(head.data if isinstance(head, Tensor) else head, dtype=np.float64).reshape(6, N_VALUES)
    base, coef = head[:3], head[3:]
    if r is None:
        logits = base[0]
    elif g is None:
        logits = base[1] + coef[0] * centered(r)
    else:
        logits = base[2] + coef[1] * centered(r) + coef[2] * centered(g)
    return logits - np.logaddexp.reduce(logits)


# ---------------------------------------------------------------------------
# dequantized continuous likelihood


def dequantize(images, rng) -> np.ndarray:
    """z = x + u - 0.5 with u ~ U[0, 1), so z lies in [x - 0.5, x + 0.5)."""
    x = np.asarray(images, dtype=np.float64)
    return x + rng.random(x.shape) - 0.5


def _log_logistic_pdf(z, mean: Tensor, log_s: Tensor) -> Tensor:
    t = (-mean + z) * T.exp(-log_s)
    return t - log_s - 2.0 * T.softplus(t)


def dequantized_logprob(z, params: MixtureParams) -> Tensor:
    """Log density of real-valued pixels ``z`` [..., 3] under the mixture.

    The indicator is shared and the green/blue means are shifted by the
    preceding channels exactly as in the discrete model.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != 3:
        raise T.ShapeError(f"pixels must have 3 channels, got {z.shape}")
    dtype = np.asarray(params.mu.data if isinstance(params.mu, Tensor) else params.mu).dtype
    z = z.astype(dtype)
    log_s = params.log_s if isinstance(params.log_s, Tensor) else Tensor(params.log_s)
    logit_pi = params.logit_pi if isinstance(params.logit_pi, Tensor) else Tensor(params.logit_pi)
    means = shifted_means(params, z[..., 0], z[..., 1])
    total = None
    for c, mean in enumerate(means):
        lp = _log_logistic_pdf(z[..., c : c + 1], mean, log_s[..., c])
        total = lp if total is None else total + lp
    return T.logsumexp(total + T.log_softmax(logit_pi, axis=-1), axis=-1)


__all__ = [
    "ABLATIONS",
    "ABLATION_FIELDS",
    "ablation_config",
    "config_diff",
    "dequantize",
    "dequantized_logprob",
    "softmax_channel_logprobs",
    "softmax_conditional_logprobs",
    "softmax_logprob",
    "softmax_pixel_logprob",
    "split_softmax_head",
]
