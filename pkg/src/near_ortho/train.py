"""Mini-batch SGD training with validation-based model selection."""

from __future__ import annotations

import math
import time

import numpy as np

from .data import OpenSetTask, Split, batches
from .diagnostics import summarize
from .errors import DivergenceError, InputError
from .eval import RunReport, anomaly_scores, auroc, top1_accuracy
from .nn import (LossConfig, Network, SgdConfig, backward, checkpoint_bytes, checkpoint_from_bytes,
                 cross_entropy, forward, lr_at, sgd_step)
from .ortho import KernelBank
from .tensor import Rng

DIVERGENCE_LIMIT = 1e6
EVAL_CHUNK = 256


def predict(net: Network, images: np.ndarray) -> np.ndarray:
    out = [forward(net, images[i:i + EVAL_CHUNK]) for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(out).astype(np.float64)


def evaluate(net: Network, split: Split, open_set: bool = True) -> tuple[str, float, float]:
    """(metric name, metric, mean CE) on a split; AUROC for open-set tasks, else top-1."""
    logits = predict(net, split.images)
    ce = cross_entropy(logits, split.labels)
    if open_set:
        return "auroc", auroc(anomaly_scores(logits), split.labels), ce
    return "top1_accuracy", top1_accuracy(logits, split.labels), ce


def as_checkpoint(net: Network) -> Network:
    """A float64 copy holding exactly the values a checkpoint of ``net`` stores."""
    return checkpoint_from_bytes(checkpoint_bytes(net))


def geometry(net: Network, tau_deg: float, epsilon: float) -> dict:
    return summarize(KernelBank.of(net), tau_deg, epsilon).to_dict()


def train(net: Network, task: OpenSetTask, loss_cfg: LossConfig, sgd_cfg: SgdConfig, rng: Rng,
          config_snapshot: dict | None = None, tau_deg: float = 10.0,
          init_log: dict | None = None) -> RunReport:
    """Train ``net`` in place and return the run report.

    The epoch with the best validation metric (earliest on ties) is selected;
    the initial weights are only a candidate when ``epochs == 0``. On return
    ``net`` holds the selected weights, rounded to checkpoint precision, and
    the test metric is measured on exactly those weights.
    """
    if min(len(task.train), len(task.val), len(task.test)) == 0:
        raise InputError("task splits must be non-empty")
    started = time.perf_counter()
    open_set = task.open_set

    init = as_checkpoint(net)
    geometry_init = geometry(init, tau_deg, loss_cfg.epsilon)
    metric_name, best_val, _ = evaluate(init, task.val, open_set)
    best_params, best_epoch = init.get_params(), 0

    train_loss, train_ce, train_reg, val_loss, val_metric = [], [], [], [], []
    for epoch in range(sgd_cfg.epochs):
        lr = lr_at(epoch, sgd_cfg)
        totals, ces, regs, sizes = [], [], [], []
        stream = rng.child(f"batches/{epoch}")
        for step, (x, y, _) in enumerate(batches(task.train, sgd_cfg.batch_size, stream)):
            parts = backward(net, x, y, loss_cfg)
            if not math.isfinite(parts.total) or abs(parts.total) > DIVERGENCE_LIMIT:
                raise DivergenceError(epoch, step, parts.total)
            sgd_step(net, lr)
            totals.append(parts.total)
            ces.append(parts.ce)
            regs.append(parts.reg)
            sizes.append(len(y))
        w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
        train_loss.append(float(np.dot(w, totals)))
        train_ce.append(float(np.dot(w, ces)))
        train_reg.append(float(np.dot(w, regs)))

        snapshot = as_checkpoint(net)
        _, metric, vloss = evaluate(snapshot, task.val, open_set)
        val_loss.append(vloss)
        val_metric.append(metric)
        if epoch == 0 or metric > best_val:
            best_val, best_epoch, best_params = metric, epoch + 1, snapshot.get_params()

    best = as_checkpoint(init)
    best.set_params(best_params)
    _, test_metric, _ = evaluate(best, task.test, open_set)
    net.set_params(best_params)

    return RunReport(
        seed=rng.seed,
        config=config_snapshot or {},
        metric_name=metric_name,
        test_metric=float(test_metric),
        best_epoch=best_epoch,
        best_val_metric=float(best_val),
        train_loss=train_loss,
        train_ce=train_ce,
        train_reg=train_reg,
        val_loss=val_loss,
        val_metric=val_metric,
        geometry_init=geometry_init,
        geometry_best=geometry(best, tau_deg, loss_cfg.epsilon),
        init_log=init_log or {},
        wall_time_s=time.perf_counter() - started,
    )
