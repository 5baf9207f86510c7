"""End-to-end runs: data, model, training loop and the files they leave behind."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ablations import ablation_config
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, desk_dataset
from .network import Model
from .plotting import plot_metrics_files
from .training import MetricsWriter, OptimState, evaluate, read_metrics, train

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.cpix"
FIGURE_FILE = "metrics.png"
CONFIG_FILE = "run_config.json"
# window for the "training loss at the end of a run" summary
RECENT_STEPS = 50


@dataclass
class RunSummary:
    out_dir: Path
    initial_train_bpd: float
    final_train_bpd: float
    final_eval_bpd: float
    steps: int
    recent_train_loss: float | None = None


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    return desk_dataset(d.cifar_path, d.n_total, d.n_eval, d.downscale, d.synthetic_seed)


def with_ablation(cfg: RunConfig, name: str) -> RunConfig:
    model_cfg, _ = ablation_config(name, cfg.model)
    return dataclasses.replace(cfg, model=model_cfg, ablation=name)


def run_training(cfg: RunConfig, data: tuple[Dataset, Dataset] | None = None, figure: bool = True) -> RunSummary:
    """Train per ``cfg`` and write config, metrics CSV, checkpoint and figure.

    ``cfg`` must already be resolved (see :meth:`RunConfig.resolved`).
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_json() + "\n", encoding="utf-8")
    train_set, eval_set = data if data is not None else load_data(cfg)
    if cfg.model.n_classes is None:
        train_set = Dataset(train_set.images, None, train_set.split)
        eval_set = Dataset(eval_set.images, None, eval_set.split)

    model = Model(cfg.model, seed=cfg.seed)
    o = cfg.optimizer
    optim = OptimState.for_model(model, lr=o.lr, lr_decay=o.lr_decay, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                                 ema_decay=o.ema_decay)
    rng = np.random.default_rng(cfg.seed)
    initial = evaluate(model, train_set)
    final_eval = recent = None
    with MetricsWriter(out / METRICS_FILE, ablation=cfg.ablation, wall_clock=cfg.wall_clock) as mw:
        if cfg.steps:
            res = train(model, train_set, optim, rng, cfg.steps, cfg.batch_size, eval_set=eval_set,
                        log_every=cfg.log_every, eval_every=cfg.eval_every, metrics=mw, use_ema_eval=cfg.use_ema_eval)
            final_eval = res.final_eval
            recent = float(np.mean(res.history[-RECENT_STEPS:]))
    save_checkpoint(out / CHECKPOINT_FILE, model, optim, rng, extra={"ablation": cfg.ablation, "step": cfg.steps})
    final_train = evaluate(model, train_set) if cfg.steps else initial
    if final_eval is None:
        final_eval = evaluate(model, eval_set, use_ema=cfg.use_ema_eval, optim=optim)
    if figure and read_metrics(out / METRICS_FILE):
        plot_metrics_files([out / METRICS_FILE], out / FIGURE_FILE, title=cfg.ablation or "training")
    log.info("run finished: train %.4f -> %.4f, eval %.4f", initial, final_train, final_eval)
    return RunSummary(out, initial, final_train, final_eval, cfg.steps, recent)


@dataclass
class AblationOutcome:
    """Final numbers of one variant and seed.

    ``train_loss`` is the mean train-mode training loss over the last
    steps, the quantity the metrics CSV logs as train_bpd. ``train_bpd`` and
    ``eval_bpd`` are eval-mode scores on the training and held-out sets.
    """

    name: str
    seed: int
    train_bpd: float
    eval_bpd: float
    train_loss: float | None = None


def ablation_study(names, seeds, steps: int, base: RunConfig, data: tuple[Dataset, Dataset],
                   out_root=None) -> list[AblationOutcome]:
    """Train every named variant (``"baseline"`` allowed) for every seed.

    All runs share the data and the step budget. Final train and eval bits are
    measured in eval mode on the raw (non-EMA) parameters.
    """
    results = []
    for seed in seeds:
        for name in names:
            cfg = base if name == "baseline" else with_ablation(base, name)
            out = Path(out_root) / f"{name}_seed{seed}" if out_root else None
            cfg = dataclasses.replace(cfg, seed=int(seed), steps=steps, eval_every=0,
                                      out_dir=str(out) if out else cfg.out_dir)
            if out is not None:
                s = run_training(cfg, data, figure=False)
                results.append(AblationOutcome(name, int(seed), s.final_train_bpd, s.final_eval_bpd,
                                               s.recent_train_loss))
                continue
            train_set, eval_set = data
            model = Model(cfg.model, seed=cfg.seed)
            optim = OptimState.for_model(model, lr=cfg.optimizer.lr, lr_decay=cfg.optimizer.lr_decay)
            rng = np.random.default_rng(cfg.seed)
            res = train(model, train_set, optim, rng, steps, cfg.batch_size, log_every=0)
            recent = float(np.mean(res.history[-RECENT_STEPS:])) if res.history else None
            results.append(AblationOutcome(name, int(seed), evaluate(model, train_set), evaluate(model, eval_set),
                                           recent))
            log.info("%s seed %d: train %.4f eval %.4f", name, seed, results[-1].train_bpd, results[-1].eval_bpd)
    return results
