"""Discretized logistic mixture likelihood over whole RGB pixels.

Each pixel is modelled as a K-component mixture whose indicator is shared by
the three channels. Red is a discretized logistic; green and blue have means
shifted linearly by the already-observed channels (in centered units, i.e.
``v / 127.5 - 1``). Edge bins 0 and 255 absorb the unbounded tails.

The bin mass ``sigmoid(a) - sigmoid(b)`` with ``a - b = 1/s`` is evaluated as
``log_sigmoid(a) + log_sigmoid(-b) + log(1 - exp(-1/s))``, which is exact in
floating point for every scale, so no small-mass fallback is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

PIXEL_SCALE = 127.5
RAW_LOG_SCALE_MIN = -7.0
LOG_SCALE_MIN = RAW_LOG_SCALE_MIN + float(np.log(PIXEL_SCALE))
CHANNELS_PER_COMPONENT = 10
DEFAULT_K = 5


class Pixel(NamedTuple):
    r: int
    g: int
    b: int


def centered(v):
    """Map integer intensities 0..255 to [-1, 1]."""
    return np.asarray(v, dtype=np.float64) / PIXEL_SCALE - 1.0


@dataclass(frozen=True)
class MixtureParams:
    """Per-pixel mixture parameters in integer-pixel units.

    Leading axes index pixels; ``logit_pi`` has shape [..., K] and the other
    fields [..., K, 3] with the last axis ordered (r, g, b). For ``coeff`` the
    last axis holds (alpha, beta, gamma): green-on-red, blue-on-red and
    blue-on-green. Fields are numpy arrays or Tensors.
    """

    logit_pi: Any
    mu: Any
    log_s: Any
    coeff: Any

    @property
    def K(self) -> int:
        return int(self.logit_pi.shape[-1])

    def numpy(self) -> MixtureParams:
        return MixtureParams(*(np.asarray(_data(f), dtype=np.float64) for f in self._fields()))

    def _fields(self):
        return (self.logit_pi, self.mu, self.log_s, self.coeff)

    def validate(self) -> None:
        lp, mu, ls, co = (np.asarray(_data(f)) for f in self._fields())
        k = lp.shape[-1]
        lead = lp.shape[:-1]
        for name, arr in (("mu", mu), ("log_s", ls), ("coeff", co)):
            if arr.shape != lead + (k, 3):
                raise ValueError(f"{name} has shape {arr.shape}, expected {lead + (k, 3)}")
        if not all(np.isfinite(a).all() for a in (lp, mu, ls, co)):
            raise ValueError("mixture parameters must be finite")
        if (ls < LOG_SCALE_MIN - 1e-9).any():
            raise ValueError("log_s below the clamp floor")
        # tanh saturates to exactly +-1 in floating point for large inputs
        if (np.abs(co) > 1).any():
            raise ValueError("coefficients must lie in [-1, 1]")


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def unpack_head(raw, K: int) -> MixtureParams:
    """Turn raw network output [..., 10*K] into :class:`MixtureParams`.

    Each component owns 10 consecutive channels: one mixture logit, three raw
    means, three raw log-scales and three raw coefficients. Raw means and
    log-scales live in centered units and are converted to integer units here.
    Works on Tensors, so gradients flow back to ``raw``.
    """
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    if raw.shape[-1] != CHANNELS_PER_COMPONENT * K:
        raise ValueError(f"head has {raw.shape[-1]} channels, expected {CHANNELS_PER_COMPONENT * K} for K={K}")
    r = raw.reshape(raw.shape[:-1] + (K, CHANNELS_PER_COMPONENT))
    logit_pi = r[..., 0]
    mu = (r[..., 1:4] + 1.0) * PIXEL_SCALE
    log_s = T.maximum(r[..., 4:7], RAW_LOG_SCALE_MIN) + float(np.log(PIXEL_SCALE))
    coeff = T.tanh(r[..., 7:10])
    return MixtureParams(logit_pi, mu, log_s, coeff)


def _bin_logprob(x: np.ndarray, mean: Tensor, log_s: Tensor) -> Tensor:
    """Log mass of the unit bin around integer ``x`` (broadcasting Tensors)."""
    inv_s = T.exp(-log_s)
    centered_x = -mean + x
    upper = (centered_x + 0.5) * inv_s
    lower = (centered_x - 0.5) * inv_s
    log_cdf_upper = T.log_sigmoid(upper)
    log_sf_lower = T.log_sigmoid(-lower)
    interior = log_cdf_upper + log_sf_lower + T.log1mexp(inv_s)
    x = np.broadcast_to(x, interior.shape)
    return T.where(x <= 0, log_cdf_upper, T.where(x >= 255, log_sf_lower, interior))


def shifted_means(params: MixtureParams, r, g):
    """Component means for (r, g, b) after the linear channel coupling.

    ``r`` and ``g`` are observed integer intensities broadcastable against
    the pixel axes. Returns three Tensors of shape [..., K].
    """
    mu = params.mu if isinstance(params.mu, Tensor) else Tensor(params.mu)
    coeff = params.coeff if isinstance(params.coeff, Tensor) else Tensor(params.coeff)
    rc = centered(r)[..., None]
    gc = centered(g)[..., None]
    mu_r = mu[..., 0]
    mu_g = mu[..., 1] + coeff[..., 0] * (rc * PIXEL_SCALE)
    mu_b = mu[..., 2] + (coeff[..., 1] * rc + coeff[..., 2] * gc) * PIXEL_SCALE
    return mu_r, mu_g, mu_b


def mixture_logprob(x, params: MixtureParams) -> Tensor:
    """Differentiable log P(pixel) for integer pixels ``x`` of shape [..., 3].

    Returns a Tensor with the leading shape of ``x``.
    """
    x = np.asarray(x)
    if x.shape[-1] != 3:
        raise ValueError(f"pixels must have 3 channels, got shape {x.shape}")
    x = x.astype(np.float64 if _dtype(params) == np.float64 else np.float32)
    log_s = params.log_s if isinstance(params.log_s, Tensor) else Tensor(params.log_s)
    logit_pi = params.logit_pi if isinstance(params.logit_pi, Tensor) else Tensor(params.logit_pi)
    mu_r, mu_g, mu_b = shifted_means(params, x[..., 0], x[..., 1])
    total = None
    for c, mean in enumerate((mu_r, mu_g, mu_b)):
        lp = _bin_logprob(x[..., c : c + 1], mean, log_s[..., c])
        total = lp if total is None else total + lp
    return T.logsumexp(total + T.log_softmax(logit_pi, axis=-1), axis=-1)


def _dtype(params: MixtureParams):
    return np.asarray(_data(params.mu)).dtype


def channel_logprob(x, mu, s):
    """log[sigmoid((x+.5-mu)/s) - sigmoid((x-.5-mu)/s)] with the edge rule.

    Broadcasts over numpy inputs; returns a float for scalar inputs.
    """
    s = np.asarray(s, dtype=np.float64)
    if (s <= 0).any():
        raise ValueError("scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    upper = (x + 0.5 - mu) / s
    lower = (x - 0.5 - mu) / s
    log_cdf_upper = -np.logaddexp(0.0, -upper)
    log_sf_lower = -np.logaddexp(0.0, lower)
    inv_s = 1.0 / s
    gap = np.where(inv_s < np.log(2.0), np.log(-np.expm1(-inv_s)), np.log1p(-np.exp(-inv_s)))
    out = np.where(x <= 0, log_cdf_upper, np.where(x >= 255, log_sf_lower, log_cdf_upper + log_sf_lower + gap))
    return float(out) if out.ndim == 0 else out


def pixel_logprob(pixel, params: MixtureParams) -> float:
    """log p(r, g, b) for a single pixel and its parameters (leading shape ())."""
    p = np.asarray(tuple(pixel), dtype=np.int64)
    if p.shape != (3,) or (p < 0).any() or (p > 255).any():
        raise ValueError(f"invalid pixel {pixel!r}")
    params.validate()
    np_params = params.numpy()
    return float(mixture_logprob(p, np_params).data)


def image_logprob(image, heads, K: int) -> float:
    """Sum of per-pixel log-probabilities of an [H, W, 3] integer image."""
    image = np.asarray(image)
    raw = np.asarray(_data(heads), dtype=np.float64)
    if image.shape[:-1] != raw.shape[:-1] or image.shape[-1] != 3:
        raise ValueError(f"image {image.shape} does not match heads {raw.shape}")
    return float(mixture_logprob(image, unpack_head(raw, K)).data.sum())


def conditional_logprobs(params: MixtureParams, r=None, g=None) -> np.ndarray:
    """Log PMF over 0..255 of the next channel given the observed prefix.

    With no prefix this is the red marginal; with ``r`` it is green given red;
    with ``r`` and ``g`` it is blue given both. ``params`` must describe a
    single pixel.
    """
    p = params.numpy()
    values = np.arange(256, dtype=np.float64)
    log_w = p.logit_pi - np.logaddexp.reduce(p.logit_pi)
    s = np.exp(p.log_s)
    rc = 0.0 if r is None else float(centered(r))
    gc = 0.0 if g is None else float(centered(g))
    means = np.stack(
        [
            p.mu[:, 0],
            p.mu[:, 1] + p.coeff[:, 0] * rc * PIXEL_SCALE,
            p.mu[:, 2] + (p.coeff[:, 1] * rc + p.coeff[:, 2] * gc) * PIXEL_SCALE,
        ],
        axis=-1,
    )
    if r is not None:
        log_w = log_w + channel_logprob(r, means[:, 0], s[:, 0])
    if g is not None:
        log_w = log_w + channel_logprob(g, means[:, 1], s[:, 1])
    log_w = log_w - np.logaddexp.reduce(log_w)
    c = 0 if r is None else (1 if g is None else 2)
    table = channel_logprob(values[None, :], means[:, c, None], s[:, c, None])
    return np.logaddexp.reduce(log_w[:, None] + table, axis=0)


def _logistic_draw(mean, log_s, u):
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    nu = mean + np.exp(log_s) * (np.log(u) - np.log1p(-u))
    return np.clip(np.rint(nu), 0, 255)


def sample_pixels(params: MixtureParams, rng) -> np.ndarray:
    """Ancestral draw of one pixel per leading index; returns uint8 [..., 3].

    ``rng`` needs a numpy-style ``random(size)`` method. Four uniforms are
    consumed per pixel: the component, then r, g, b by inverse CDF.
    """
    p = params.numpy()
    lead = p.logit_pi.shape[:-1]
    u = np.asarray(rng.random(lead + (4,)), dtype=np.float64)
    log_pi = p.logit_pi - np.logaddexp.reduce(p.logit_pi, axis=-1, keepdims=True)
    cdf = np.cumsum(np.exp(log_pi), axis=-1)
    comp = np.minimum((cdf <= u[..., :1]).sum(axis=-1), p.K - 1)
    pick = comp[..., None, None]
    mu = np.take_along_axis(p.mu, pick, axis=-2)[..., 0, :]
    log_s = np.take_along_axis(p.log_s, pick, axis=-2)[..., 0, :]
    coeff = np.take_along_axis(p.coeff, pick, axis=-2)[..., 0, :]
    r = _logistic_draw(mu[..., 0], log_s[..., 0], u[..., 1])
    rc = centered(r)
    g = _logistic_draw(mu[..., 1] + coeff[..., 0] * rc * PIXEL_SCALE, log_s[..., 1], u[..., 2])
    gc = centered(g)
    b = _logistic_draw(mu[..., 2] + (coeff[..., 1] * rc + coeff[..., 2] * gc) * PIXEL_SCALE, log_s[..., 2], u[..., 3])
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def sample_pixel(params: MixtureParams, rng) -> Pixel:
    params.validate()
    return Pixel(*(int(v) for v in sample_pixels(params, rng)))
