"""Loss in bits per sub-pixel, Adam with EMA, the training loop, evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ablations import dequantize, dequantized_logprob, softmax_channel_logprobs
from .data import Dataset
from .dlm import mixture_logprob, unpack_head
from .network import Model, forward, preprocess

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "train_bpd", "eval_bpd", "seconds")


class TrainingError(RuntimeError):
    """A step produced a non-finite loss or gradient; parameters were kept."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")
        self.batch_index = batch_index


def bits_per_subpixel(total_logprob_nats: float, n_images: int, height: int, width: int) -> float:
    """-log2 likelihood averaged over every sub-pixel."""
    if min(n_images, height, width) <= 0:
        raise ValueError("image count and extents must be positive")
    return -float(total_logprob_nats) / (n_images * height * width * 3 * math.log(2.0))


def log_likelihood_terms(model: Model, images, labels=None, mode: str = "eval", rng=None) -> T.Tensor:
    """Per-pixel log-likelihoods (nats), [N, H, W]; [N, H, W, 3] for the softmax head.

    For the dequantized likelihood this is the log density of the noisy
    images, a lower bound on the discrete log-likelihood; noise comes from
    ``rng``.
    """
    cfg = model.config
    images = np.asarray(images)
    if cfg.likelihood == "dequantized":
        if rng is None:
            raise ValueError("the dequantized likelihood needs an rng for the noise")
        z = dequantize(images, rng)
        head = forward(model, z / 127.5 - 1.0, labels, mode, rng)
        return dequantized_logprob(z, unpack_head(head, cfg.K))
    head = forward(model, preprocess(images), labels, mode, rng)
    if cfg.likelihood == "softmax":
        return softmax_channel_logprobs(images, head)
    return mixture_logprob(images, unpack_head(head, cfg.K))


def log_likelihood(model: Model, images, labels=None, mode: str = "eval", rng=None) -> T.Tensor:
    """Total log-likelihood (nats) of a uint8 batch as a differentiable scalar."""
    return log_likelihood_terms(model, images, labels, mode, rng).sum()


@dataclass
class OptimState:
    """Adam moments, learning-rate schedule and EMA shadow parameters."""

    lr: float = 1e-3
    lr_decay: float = 0.999995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9995
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, **settings) -> OptimState:
        st = cls(**settings)
        for name, p in model.params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
            st.ema[name] = p.data.copy()
        return st

    def scalars(self) -> dict:
        keys = ("lr", "lr_decay", "beta1", "beta2", "eps", "ema_decay", "step")
        return {k: getattr(self, k) for k in keys}


def adam_update(model: Model, grads: dict, st: OptimState) -> None:
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1**st.step
    c2 = 1.0 - b2**st.step
    new = {}
    for name, p in model.params.items():
        g = grads[name]
        m = b1 * st.m[name] + (1 - b1) * g
        v = b2 * st.v[name] + (1 - b2) * g * g
        st.m[name], st.v[name] = m, v
        step = (st.lr / c1) * m / (np.sqrt(v / c2) + st.eps)
        new[name] = p.data - step.astype(p.dtype)
        st.ema[name] = (st.ema_decay * st.ema[name] + (1 - st.ema_decay) * new[name]).astype(p.dtype)
    model.set_params(new)
    st.lr *= st.lr_decay


def train_step(model: Model, images, labels, st: OptimState, rng, batch_index: int | None = None) -> float:
    """One Adam step on the mean NLL of a batch; returns its bits/sub-pixel.

    On a non-finite loss or gradient the parameters and optimizer state are
    left untouched and :class:`TrainingError` is raised.
    """
    images = np.asarray(images)
    n, h, w, _ = images.shape
    try:
        with T.Tape() as tape:
            ll = log_likelihood(model, images, labels, "train", rng)
            loss = ll * (-1.0 / (n * h * w * 3 * math.log(2.0)))
        grads = T.backward(tape, loss, model.params)
    except T.NonFiniteError as exc:
        raise TrainingError(f"non-finite loss: {exc}", batch_index) from exc
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingError("non-finite gradient", batch_index)
    adam_update(model, grads, st)
    return float(loss.data)


def _batches(n: int, batch_size: int):
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def evaluate(model: Model, dataset: Dataset, use_ema: bool = False, optim: OptimState | None = None,
             batch_size: int = 50, seed: int = 0) -> float:
    """Eval-mode bits per sub-pixel over the whole dataset.

    ``use_ema`` evaluates the EMA shadow held by ``optim``. ``seed`` only
    matters for the dequantized likelihood (its noise).
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    saved = None
    if use_ema:
        if optim is None or not optim.ema:
            raise ValueError("use_ema needs an OptimState with EMA parameters")
        saved = model.param_values()
        model.set_params(optim.ema)
    try:
        rng = np.random.default_rng(seed)
        terms = []
        for sl in _batches(len(dataset), batch_size):
            labels = None if dataset.labels is None or model.config.n_classes is None else dataset.labels[sl]
            lp = log_likelihood_terms(model, dataset.images[sl], labels, "eval", rng).data
            terms.extend(lp.astype(np.float64).ravel().tolist())
        # exact summation: the metric does not depend on batching or order
        total = math.fsum(terms)
    finally:
        if saved is not None:
            model.set_params(saved)
    h, w = dataset.hw
    return bits_per_subpixel(total, len(dataset), h, w)


class MetricsWriter:
    """CSV rows ``step,train_bpd,eval_bpd,seconds[,ablation]``.

    Empty fields mean "not measured at this step". ``seconds`` is left empty
    unless wall-clock logging is on, which keeps files byte-reproducible.
    """

    def __init__(self, path, ablation: str | None = None, wall_clock: bool = False):
        self.path = path
        self.ablation = ablation
        self.wall_clock = wall_clock
        self._t0 = time.perf_counter()
        header = list(METRICS_HEADER) + (["ablation"] if ablation is not None else [])
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)
        self._fh.flush()

    def write(self, step: int, train_bpd=None, eval_bpd=None) -> None:
        row = [str(step), _fmt(train_bpd), _fmt(eval_bpd)]
        row.append(f"{time.perf_counter() - self._t0:.3f}" if self.wall_clock else "")
        if self.ablation is not None:
            row.append(self.ablation)
        self._w.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("train_bpd", "eval_bpd", "seconds"):
            r[k] = float(r[k]) if r.get(k) else None
        r["step"] = int(r["step"])
    return rows


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    final_eval: float | None = None


def train(model: Model, train_set: Dataset, optim: OptimState, rng: np.random.Generator, steps: int,
          batch_size: int = 16, eval_set: Dataset | None = None, log_every: int = 10, eval_every: int = 0,
          metrics: MetricsWriter | None = None, use_ema_eval: bool = False) -> TrainResult:
    """Run ``steps`` Adam steps over shuffled epochs of ``train_set``.

    Every ``log_every`` steps a row with the mean train bits of the window is
    written; every ``eval_every`` steps (0 = never) the eval set is scored.
    """
    result = TrainResult()
    n = len(train_set)
    use_labels = model.config.n_classes is not None and train_set.labels is not None
    order: list[int] = []
    window: list[float] = []
    for step in range(1, steps + 1):
        if len(order) < batch_size:
            order.extend(int(i) for i in rng.permutation(n))
        idx = np.array(order[:batch_size])
        del order[:batch_size]
        labels = train_set.labels[idx] if use_labels else None
        bpd = train_step(model, train_set.images[idx], labels, optim, rng, batch_index=step)
        window.append(bpd)
        result.history.append(bpd)
        eval_bpd = None
        if eval_set is not None and eval_every and step % eval_every == 0:
            eval_bpd = evaluate(model, eval_set, use_ema=use_ema_eval, optim=optim)
        if (log_every and step % log_every == 0) or eval_bpd is not None or step == steps:
            mean_bpd = float(np.mean(window)) if window else None
            window = []
            log.info("step %d train %.4f eval %s", step, mean_bpd, eval_bpd)
            if metrics is not None:
                metrics.write(step, mean_bpd, eval_bpd)
    if eval_set is not None:
        result.final_eval = evaluate(model, eval_set, use_ema=use_ema_eval, optim=optim)
    return result
